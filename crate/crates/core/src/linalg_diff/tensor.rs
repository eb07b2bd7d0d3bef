use nalgebra::DMatrix;
use num_complex::Complex64;

use crate::error::{Error, Result};

pub type C64 = Complex64;

pub const ZERO: C64 = C64::new(0.0, 0.0);
pub const ONE: C64 = C64::new(1.0, 0.0);
pub const I: C64 = C64::new(0.0, 1.0);

/// Dense row-major complex tensor.
#[derive(Clone, Debug, PartialEq)]
pub struct ComplexTensor {
    data: Vec<C64>,
    shape: Vec<usize>,
}

/// Operand transform for [`ComplexTensor::gemm`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Op {
    N,
    T,
    /// Conjugate transpose.
    H,
    /// Elementwise conjugate, no transpose.
    C,
}

impl ComplexTensor {
    pub fn new(data: Vec<C64>, shape: Vec<usize>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} scalars, got {}",
                shape,
                n,
                data.len()
            )));
        }
        Ok(ComplexTensor { data, shape })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        ComplexTensor { data: vec![ZERO; n], shape: shape.to_vec() }
    }

    pub fn scalar(z: C64) -> Self {
        ComplexTensor { data: vec![z], shape: vec![] }
    }

    pub fn from_real(values: &[f64], shape: &[usize]) -> Result<Self> {
        Self::new(values.iter().map(|&x| C64::new(x, 0.0)).collect(), shape.to_vec())
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = ONE;
        }
        t
    }

    pub fn from_fn2(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> C64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        ComplexTensor { data, shape: vec![rows, cols] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[C64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [C64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<C64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn ndim(&self) -> usize {
        self.shape.len()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        self.shape[1]
    }

    pub fn scalar_value(&self) -> C64 {
        self.data[0]
    }

    pub fn at2(&self, i: usize, j: usize) -> C64 {
        self.data[i * self.shape[1] + j]
    }

    pub fn set2(&mut self, i: usize, j: usize, z: C64) {
        let c = self.shape[1];
        self.data[i * c + j] = z;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|z| z.re.is_finite() && z.im.is_finite())
    }

    fn require_2d(&self, what: &str) -> Result<()> {
        if self.shape.len() != 2 {
            return Err(Error::Shape(format!("{} expects a matrix, got shape {:?}", what, self.shape)));
        }
        Ok(())
    }

    pub fn reshape(mut self, shape: &[usize]) -> Result<Self> {
        let n: usize = shape.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {:?}", self.shape, shape)));
        }
        self.shape = shape.to_vec();
        Ok(self)
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let nd = self.shape.len();
        let mut seen = vec![false; nd];
        if perm.len() != nd || perm.iter().any(|&p| p >= nd || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::Shape(format!("bad permutation {:?} for shape {:?}", perm, self.shape)));
        }
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(self.clone());
        }
        let mut in_strides = vec![1usize; nd];
        for i in (0..nd.saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * self.shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape[p]).collect();
        let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
        let total = self.data.len();
        let mut out = Vec::with_capacity(total);
        if total > 0 {
            // Odometer over the output index, innermost axis unrolled.
            let last = nd - 1;
            let (inner_n, inner_s) = (out_shape[last], strides[last]);
            let mut idx = vec![0usize; nd];
            let mut base = 0usize;
            loop {
                let mut off = base;
                for _ in 0..inner_n {
                    out.push(self.data[off]);
                    off += inner_s;
                }
                let mut ax = last;
                loop {
                    if ax == 0 {
                        return Ok(ComplexTensor { data: out, shape: out_shape });
                    }
                    ax -= 1;
                    idx[ax] += 1;
                    base += strides[ax];
                    if idx[ax] < out_shape[ax] {
                        break;
                    }
                    base -= strides[ax] * idx[ax];
                    idx[ax] = 0;
                }
            }
        }
        Ok(ComplexTensor { data: out, shape: out_shape })
    }

    pub fn conj(&self) -> Self {
        ComplexTensor { data: self.data.iter().map(|z| z.conj()).collect(), shape: self.shape.clone() }
    }

    pub fn transpose(&self) -> Result<Self> {
        self.require_2d("transpose")?;
        self.permute(&[1, 0])
    }

    pub fn adjoint(&self) -> Result<Self> {
        Ok(self.transpose()?.conj())
    }

    pub fn scale(&self, z: C64) -> Self {
        ComplexTensor { data: self.data.iter().map(|x| x * z).collect(), shape: self.shape.clone() }
    }

    pub fn map(&self, f: impl Fn(C64) -> C64) -> Self {
        ComplexTensor { data: self.data.iter().map(|&x| f(x)).collect(), shape: self.shape.clone() }
    }

    fn zip_check(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape != other.shape {
            return Err(Error::Shape(format!("{}: shapes {:?} and {:?}", what, self.shape, other.shape)));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "add")?;
        Ok(ComplexTensor {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect(),
            shape: self.shape.clone(),
        })
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "sub")?;
        Ok(ComplexTensor {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect(),
            shape: self.shape.clone(),
        })
    }

    pub fn hadamard(&self, other: &Self) -> Result<Self> {
        self.zip_check(other, "hadamard")?;
        Ok(ComplexTensor {
            data: self.data.iter().zip(&other.data).map(|(a, b)| a * b).collect(),
            shape: self.shape.clone(),
        })
    }

    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        self.zip_check(other, "add_assign")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn norm_sqr(&self) -> f64 {
        self.data.iter().map(|z| z.norm_sqr()).sum()
    }

    pub fn frobenius(&self) -> f64 {
        self.norm_sqr().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().map(|z| z.norm()).fold(0.0, f64::max)
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        assert_eq!(self.shape, other.shape);
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max)
    }

    /// Real inner product Re⟨self, other⟩ = Σ Re(conj(a) b).
    pub fn real_dot(&self, other: &Self) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| a.re * b.re + a.im * b.im).sum()
    }

    pub fn trace(&self) -> C64 {
        let n = self.shape[0].min(self.shape[1]);
        (0..n).map(|i| self.at2(i, i)).sum()
    }

    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        if axis >= self.shape.len() || start + len > self.shape[axis] {
            return Err(Error::Shape(format!(
                "slice axis {} [{}, {}) of shape {:?}",
                axis,
                start,
                start + len,
                self.shape
            )));
        }
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let n = self.shape[axis];
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * n + start) * inner;
            data.extend_from_slice(&self.data[s..s + len * inner]);
        }
        let mut shape = self.shape.clone();
        shape[axis] = len;
        Ok(ComplexTensor { data, shape })
    }

    /// Inverse of `slice_axis`: embeds `self` into zeros of `full_len` along `axis`.
    pub fn pad_axis(&self, axis: usize, start: usize, full_len: usize) -> Self {
        let outer: usize = self.shape[..axis].iter().product();
        let inner: usize = self.shape[axis + 1..].iter().product();
        let len = self.shape[axis];
        let mut shape = self.shape.clone();
        shape[axis] = full_len;
        let mut out = Self::zeros(&shape);
        for o in 0..outer {
            let src = o * len * inner;
            let dst = (o * full_len + start) * inner;
            out.data[dst..dst + len * inner].copy_from_slice(&self.data[src..src + len * inner]);
        }
        out
    }

    pub fn concat(parts: &[&Self], axis: usize) -> Result<Self> {
        let first = parts.first().ok_or_else(|| Error::Shape("concat of nothing".into()))?;
        let nd = first.shape.len();
        if axis >= nd {
            return Err(Error::Shape(format!("concat axis {} of rank {}", axis, nd)));
        }
        for p in parts {
            if p.shape.len() != nd
                || p.shape.iter().enumerate().any(|(i, &d)| i != axis && d != first.shape[i])
            {
                return Err(Error::Shape(format!("concat: {:?} vs {:?}", p.shape, first.shape)));
            }
        }
        let outer: usize = first.shape[..axis].iter().product();
        let inner: usize = first.shape[axis + 1..].iter().product();
        let total: usize = parts.iter().map(|p| p.shape[axis]).sum();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let w = p.shape[axis] * inner;
                data.extend_from_slice(&p.data[o * w..(o + 1) * w]);
            }
        }
        let mut shape = first.shape.clone();
        shape[axis] = total;
        Ok(ComplexTensor { data, shape })
    }

    pub fn matmul(&self, other: &Self) -> Result<Self> {
        Self::gemm(self, Op::N, other, Op::N)
    }

    /// op(a) · op(b) for matrices.
    pub fn gemm(a: &Self, ta: Op, b: &Self, tb: Op) -> Result<Self> {
        a.require_2d("gemm")?;
        b.require_2d("gemm")?;
        let conj_a;
        let (ad, ar, ac, ars, acs) = {
            let (r, c) = (a.shape[0], a.shape[1]);
            let src = if matches!(ta, Op::H | Op::C) {
                conj_a = a.conj();
                &conj_a.data
            } else {
                &a.data
            };
            match ta {
                Op::N | Op::C => (src, r, c, c as isize, 1isize),
                Op::T | Op::H => (src, c, r, 1isize, c as isize),
            }
        };
        let conj_b;
        let (bd, br, bc, brs, bcs) = {
            let (r, c) = (b.shape[0], b.shape[1]);
            let src = if matches!(tb, Op::H | Op::C) {
                conj_b = b.conj();
                &conj_b.data
            } else {
                &b.data
            };
            match tb {
                Op::N | Op::C => (src, r, c, c as isize, 1isize),
                Op::T | Op::H => (src, c, r, 1isize, c as isize),
            }
        };
        if ac != br {
            return Err(Error::Shape(format!(
                "matmul inner dimensions {}x{} · {}x{}",
                ar, ac, br, bc
            )));
        }
        let mut out = vec![ZERO; ar * bc];
        if ar > 0 && bc > 0 && ac > 0 {
            // SAFETY: Complex<f64> is repr(C) {re, im}, layout-identical to [f64; 2];
            // strides describe in-bounds views of the source buffers.
            unsafe {
                matrixmultiply::zgemm(
                    matrixmultiply::CGemmOption::Standard,
                    matrixmultiply::CGemmOption::Standard,
                    ar,
                    ac,
                    bc,
                    [1.0, 0.0],
                    ad.as_ptr() as *const [f64; 2],
                    ars,
                    acs,
                    bd.as_ptr() as *const [f64; 2],
                    brs,
                    bcs,
                    [0.0, 0.0],
                    out.as_mut_ptr() as *mut [f64; 2],
                    bc as isize,
                    1,
                );
            }
        }
        Ok(ComplexTensor { data: out, shape: vec![ar, bc] })
    }

    pub fn kron(&self, other: &Self) -> Result<Self> {
        self.require_2d("kron")?;
        other.require_2d("kron")?;
        let (ar, ac) = (self.shape[0], self.shape[1]);
        let (br, bc) = (other.shape[0], other.shape[1]);
        Ok(Self::from_fn2(ar * br, ac * bc, |i, j| {
            self.at2(i / br, j / bc) * other.at2(i % br, j % bc)
        }))
    }

    pub fn to_matrix(&self) -> Result<DMatrix<C64>> {
        self.require_2d("to_matrix")?;
        Ok(DMatrix::from_row_slice(self.shape[0], self.shape[1], &self.data))
    }

    pub fn from_matrix(m: &DMatrix<C64>) -> Self {
        Self::from_fn2(m.nrows(), m.ncols(), |i, j| m[(i, j)])
    }
}
