//! Primitive operations with reverse-mode rules.
//!
//! Adjoint convention: for a real loss L and complex z, z̄ = ∂L/∂Re z + i ∂L/∂Im z.
//! For holomorphic w = f(z) this gives z̄ = conj(f'(z)) w̄.

use std::any::Any;

use super::decomp::{self, broadened_inverse, Svd};
use super::tensor::{ComplexTensor, Op, C64, I, ONE, ZERO};
use crate::error::{Error, Result};

/// Lorentzian width applied to inverse singular-value gaps.
pub const GAP_EPS: f64 = 1e-12;

pub struct Forward {
    pub outputs: Vec<ComplexTensor>,
    pub saved: Option<Box<dyn Any + Send>>,
}

impl Forward {
    pub fn one(t: ComplexTensor) -> Self {
        Forward { outputs: vec![t], saved: None }
    }
}

pub trait Primitive: Send {
    fn name(&self) -> &'static str;
    fn forward(&self, inputs: &[&ComplexTensor]) -> Result<Forward>;
    /// Returns one adjoint per input; `None` means zero.
    fn backward(
        &self,
        inputs: &[&ComplexTensor],
        fwd: &Forward,
        grads: &[Option<&ComplexTensor>],
    ) -> Result<Vec<Option<ComplexTensor>>>;
}

fn saved<'a, T: 'static>(fwd: &'a Forward) -> &'a T {
    fwd.saved.as_ref().and_then(|b| b.downcast_ref::<T>()).expect("saved state type")
}

fn grad_or_zero(g: Option<&ComplexTensor>, like: &ComplexTensor) -> ComplexTensor {
    g.cloned().unwrap_or_else(|| ComplexTensor::zeros(like.shape()))
}

fn real_tensor(t: &ComplexTensor) -> ComplexTensor {
    t.map(|z| C64::new(z.re, 0.0))
}

pub struct Reshape(pub Vec<usize>);

impl Primitive for Reshape {
    fn name(&self) -> &'static str {
        "reshape"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].clone().reshape(&self.0)?))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        Ok(vec![g[0].map(|g| g.clone().reshape(x[0].shape())).transpose()?])
    }
}

pub struct Permute(pub Vec<usize>);

impl Primitive for Permute {
    fn name(&self) -> &'static str {
        "permute"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].permute(&self.0)?))
    }
    fn backward(&self, _: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let mut inv = vec![0; self.0.len()];
        for (i, &p) in self.0.iter().enumerate() {
            inv[p] = i;
        }
        Ok(vec![g[0].map(|g| g.permute(&inv)).transpose()?])
    }
}

pub struct Slice {
    pub axis: usize,
    pub start: usize,
    pub len: usize,
}

impl Primitive for Slice {
    fn name(&self) -> &'static str {
        "slice"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].slice_axis(self.axis, self.start, self.len)?))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let full = x[0].shape()[self.axis];
        Ok(vec![g[0].map(|g| g.pad_axis(self.axis, self.start, full))])
    }
}

pub struct Concat(pub usize);

impl Primitive for Concat {
    fn name(&self) -> &'static str {
        "concat"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(ComplexTensor::concat(x, self.0)?))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None; x.len()]) };
        let mut start = 0;
        let mut out = Vec::with_capacity(x.len());
        for xi in x {
            let len = xi.shape()[self.0];
            out.push(Some(g.slice_axis(self.0, start, len)?));
            start += len;
        }
        Ok(out)
    }
}

pub struct MatMul;

impl Primitive for MatMul {
    fn name(&self) -> &'static str {
        "matmul"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].matmul(x[1])?))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None, None]) };
        let ga = ComplexTensor::gemm(g, Op::N, x[1], Op::H)?;
        let gb = ComplexTensor::gemm(x[0], Op::H, g, Op::N)?;
        Ok(vec![Some(ga), Some(gb)])
    }
}

pub struct Conj;

impl Primitive for Conj {
    fn name(&self) -> &'static str {
        "conj"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].conj()))
    }
    fn backward(&self, _: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        Ok(vec![g[0].map(|g| g.conj())])
    }
}

pub struct Add;

impl Primitive for Add {
    fn name(&self) -> &'static str {
        "add"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].add(x[1])?))
    }
    fn backward(&self, _: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        Ok(vec![g[0].cloned(), g[0].cloned()])
    }
}

pub struct Hadamard;

impl Primitive for Hadamard {
    fn name(&self) -> &'static str {
        "hadamard"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].hadamard(x[1])?))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None, None]) };
        Ok(vec![Some(x[1].conj().hadamard(g)?), Some(x[0].conj().hadamard(g)?)])
    }
}

pub struct Scale(pub C64);

impl Primitive for Scale {
    fn name(&self) -> &'static str {
        "scale"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].scale(self.0)))
    }
    fn backward(&self, _: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        Ok(vec![g[0].map(|g| g.scale(self.0.conj()))])
    }
}

/// Re(x) as a complex tensor with zero imaginary part.
pub struct RealPart;

impl Primitive for RealPart {
    fn name(&self) -> &'static str {
        "real"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(real_tensor(x[0])))
    }
    fn backward(&self, _: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        Ok(vec![g[0].map(real_tensor)])
    }
}

pub struct SumAll;

impl Primitive for SumAll {
    fn name(&self) -> &'static str {
        "sum"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(ComplexTensor::scalar(x[0].data().iter().sum())))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        Ok(vec![g[0].map(|g| ComplexTensor::zeros(x[0].shape()).map(|_| g.scalar_value()))])
    }
}

/// ln(max(Re x, floor)), real valued.
pub struct LogReal(pub f64);

impl Primitive for LogReal {
    fn name(&self) -> &'static str {
        "log"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        Ok(Forward::one(x[0].map(|z| C64::new(z.re.max(self.0).ln(), 0.0))))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None]) };
        let data = x[0]
            .data()
            .iter()
            .zip(g.data())
            .map(|(z, gz)| if z.re > self.0 { C64::new(gz.re / z.re, 0.0) } else { ZERO })
            .collect();
        Ok(vec![Some(ComplexTensor::new(data, x[0].shape().to_vec())?)])
    }
}

/// sqrt(Re x), real valued; input must be positive.
pub struct SqrtReal;

impl Primitive for SqrtReal {
    fn name(&self) -> &'static str {
        "sqrt"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        if x[0].data().iter().any(|z| z.re <= 0.0) {
            return Err(Error::Numeric("sqrt of non-positive value".into()));
        }
        Ok(Forward::one(x[0].map(|z| C64::new(z.re.sqrt(), 0.0))))
    }
    fn backward(&self, _: &[&ComplexTensor], fwd: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None]) };
        let y = &fwd.outputs[0];
        let data = y.data().iter().zip(g.data()).map(|(y, gz)| C64::new(gz.re / (2.0 * y.re), 0.0)).collect();
        Ok(vec![Some(ComplexTensor::new(data, y.shape().to_vec())?)])
    }
}

/// x / s for a scalar s.
pub struct DivScalar;

impl Primitive for DivScalar {
    fn name(&self) -> &'static str {
        "div_scalar"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        if x[1].len() != 1 {
            return Err(Error::Shape(format!("divisor must be scalar, got {:?}", x[1].shape())));
        }
        let s = x[1].scalar_value();
        if s == ZERO {
            return Err(Error::Numeric("division by zero".into()));
        }
        Ok(Forward::one(x[0].scale(s.inv())))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None, None]) };
        let s = x[1].scalar_value();
        let gx = g.scale(s.conj().inv());
        let ds: C64 = x[0].data().iter().zip(g.data()).map(|(xi, gi)| (-xi / (s * s)).conj() * gi).sum();
        Ok(vec![Some(gx), Some(ComplexTensor::new(vec![ds], x[1].shape().to_vec())?)])
    }
}

/// Picks entries of a flattened tensor.
pub struct Gather(pub Vec<usize>);

impl Primitive for Gather {
    fn name(&self) -> &'static str {
        "gather"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        let d = x[0].data();
        if let Some(&bad) = self.0.iter().find(|&&i| i >= d.len()) {
            return Err(Error::Shape(format!("gather index {} out of {}", bad, d.len())));
        }
        let out = self.0.iter().map(|&i| d[i]).collect();
        Ok(Forward::one(ComplexTensor::new(out, vec![self.0.len()])?))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None]) };
        let mut out = ComplexTensor::zeros(x[0].shape());
        for (&i, gi) in self.0.iter().zip(g.data()) {
            out.data_mut()[i] += gi;
        }
        Ok(vec![Some(out)])
    }
}

/// Builds the n×n Hermitian matrix from n² reals: diagonal first, then the
/// strict upper triangle row by row as (re, im) pairs.
pub struct HermitianFromParams(pub usize);

pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |j| (j + 1..n).map(move |k| (j, k)))
}

impl Primitive for HermitianFromParams {
    fn name(&self) -> &'static str {
        "hermitian_from_params"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        let n = self.0;
        let th = x[0].data();
        if th.len() != n * n {
            return Err(Error::ParamShape { expected: n * n, got: th.len() });
        }
        let mut h = ComplexTensor::zeros(&[n, n]);
        for j in 0..n {
            h.set2(j, j, C64::new(th[j].re, 0.0));
        }
        for (p, (j, k)) in upper_pairs(n).enumerate() {
            let z = C64::new(th[n + 2 * p].re, th[n + 2 * p + 1].re);
            h.set2(j, k, z);
            h.set2(k, j, z.conj());
        }
        Ok(Forward::one(h))
    }
    fn backward(&self, x: &[&ComplexTensor], _: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None]) };
        let n = self.0;
        let mut out = vec![ZERO; n * n];
        for j in 0..n {
            out[j] = C64::new(g.at2(j, j).re, 0.0);
        }
        for (p, (j, k)) in upper_pairs(n).enumerate() {
            let (a, b) = (g.at2(j, k), g.at2(k, j));
            out[n + 2 * p] = C64::new(a.re + b.re, 0.0);
            out[n + 2 * p + 1] = C64::new(a.im - b.im, 0.0);
        }
        Ok(vec![Some(ComplexTensor::new(out, x[0].shape().to_vec())?)])
    }
}

/// e^{iH} for Hermitian H via eigendecomposition.
pub struct ExpIHermitian;

struct EigSaved {
    vals: Vec<f64>,
    q: ComplexTensor,
}

impl Primitive for ExpIHermitian {
    fn name(&self) -> &'static str {
        "matrix_exp"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        let (vals, q) = decomp::eigh(x[0])?;
        let n = vals.len();
        let phases: Vec<C64> = vals.iter().map(|&l| (I * l).exp()).collect();
        let qd = ComplexTensor::from_fn2(n, n, |i, j| q.at2(i, j) * phases[j]);
        let u = ComplexTensor::gemm(&qd, Op::N, &q, Op::H)?;
        Ok(Forward { outputs: vec![u], saved: Some(Box::new(EigSaved { vals, q })) })
    }
    fn backward(&self, _: &[&ComplexTensor], fwd: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(g) = g[0] else { return Ok(vec![None]) };
        let EigSaved { vals, q } = saved::<EigSaved>(fwd);
        let n = vals.len();
        let w = ComplexTensor::gemm(&ComplexTensor::gemm(q, Op::H, g, Op::N)?, Op::N, q, Op::N)?;
        // Divided differences of e^{ix}: i·e^{i(a+b)/2}·sinc((a−b)/2).
        let inner = ComplexTensor::from_fn2(n, n, |j, k| {
            let half = 0.5 * (vals[j] - vals[k]);
            let sinc = if half.abs() < 1e-8 { 1.0 - half * half / 6.0 } else { half.sin() / half };
            let phi = I * (I * (0.5 * (vals[j] + vals[k]))).exp() * sinc;
            phi.conj() * w.at2(j, k)
        });
        let h = ComplexTensor::gemm(&q.matmul(&inner)?, Op::N, q, Op::H)?;
        Ok(vec![Some(h)])
    }
}

fn mul_diag_right(a: &ComplexTensor, d: &[f64]) -> ComplexTensor {
    ComplexTensor::from_fn2(a.rows(), a.cols(), |i, j| a.at2(i, j) * d[j])
}

fn mul_diag_left(d: &[f64], a: &ComplexTensor) -> ComplexTensor {
    ComplexTensor::from_fn2(a.rows(), a.cols(), |i, j| a.at2(i, j) * d[i])
}

/// P⊥ X = X − U (U† X).
fn project_out(u: &ComplexTensor, x: &ComplexTensor) -> Result<ComplexTensor> {
    x.sub(&u.matmul(&ComplexTensor::gemm(u, Op::H, x, Op::N)?)?)
}

fn kept_rank(target: usize, dec: &Svd) -> usize {
    target.min(dec.rank()).max(1).min(dec.s.len())
}

/// Truncated SVD with outputs (U, S, V†) and the full reverse rule.
/// Null directions beyond the numerical rank are treated as an exact complement.
pub struct TruncatedSvd(pub usize);

struct SvdSaved {
    /// Thin SVD restricted to the numerical rank.
    dec: Svd,
    r: usize,
}

impl Primitive for TruncatedSvd {
    fn name(&self) -> &'static str {
        "truncated_svd"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        if self.0 == 0 {
            return Err(Error::Shape("target rank must be at least 1".into()));
        }
        let full = decomp::svd(x[0])?;
        let r = kept_rank(self.0, &full);
        let dec = full.truncate(full.rank().max(r))?;
        let kept = dec.truncate(r)?;
        let s = ComplexTensor::from_real(&kept.s, &[r])?;
        Ok(Forward { outputs: vec![kept.u, s, kept.vh], saved: Some(Box::new(SvdSaved { dec, r })) })
    }
    fn backward(&self, _: &[&ComplexTensor], fwd: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let SvdSaved { dec, r } = saved::<SvdSaved>(fwd);
        let (r, p) = (*r, dec.s.len());
        let (m, n) = (dec.u.rows(), dec.vh.cols());
        let s = &dec.s;
        let gu = grad_or_zero(g[0], &fwd.outputs[0]).pad_axis(1, 0, p);
        let gvh = grad_or_zero(g[2], &fwd.outputs[2]).pad_axis(0, 0, p);
        let gv = gvh.adjoint()?;
        let v = dec.vh.adjoint()?;
        let a = ComplexTensor::gemm(&dec.u, Op::H, &gu, Op::N)?;
        let b = ComplexTensor::gemm(&v, Op::H, &gv, Op::N)?;
        let mut core = ComplexTensor::zeros(&[p, p]);
        for i in 0..p {
            for j in 0..p {
                let z = if i == j {
                    let gs = if i < r { g[1].map_or(0.0, |g| g.data()[i].re) } else { 0.0 };
                    C64::new(gs, (a.at2(i, i).im - b.at2(i, i).im) / (2.0 * s[i]))
                } else {
                    let f = broadened_inverse(s[j] * s[j] - s[i] * s[i], GAP_EPS);
                    let aa = a.at2(i, j) - a.at2(j, i).conj();
                    let bb = b.at2(i, j) - b.at2(j, i).conj();
                    f * (aa * s[j] + bb * s[i])
                };
                core.set2(i, j, z);
            }
        }
        let inv: Vec<f64> = s.iter().map(|x| 1.0 / x).collect();
        let mut gm = dec.u.matmul(&core)?.matmul(&dec.vh)?;
        if m > p {
            let t = project_out(&dec.u, &mul_diag_right(&gu, &inv))?;
            gm.add_assign(&t.matmul(&dec.vh)?)?;
        }
        if n > p {
            let t = project_out(&v, &mul_diag_right(&gv, &inv))?;
            gm.add_assign(&ComplexTensor::gemm(&dec.u, Op::N, &t, Op::H)?)?;
        }
        Ok(vec![Some(gm)])
    }
}

/// Cross-block part of the gauge-invariant split adjoint: returns R̄' (p×p)
/// given Y = U†G restricted to kept columns.
fn split_cross(s: &[f64], r: usize, y: &ComplexTensor) -> ComplexTensor {
    let p = s.len();
    let mut out = ComplexTensor::zeros(&[p, p]);
    for i in r..p {
        for j in 0..r {
            let f = broadened_inverse(s[j] * s[j] - s[i] * s[i], GAP_EPS);
            let yij = y.at2(i, j);
            out.set2(i, j, yij * (f * s[j]));
            out.set2(j, i, yij.conj() * (f * s[i]));
        }
    }
    out
}

/// M (m×n) → (Q, R) with Q = U_r and R = S_r V_r†, so QR is the rank-r
/// truncation of M. The adjoint assumes the loss is invariant under
/// Q → QW, R → W†R for unitary W.
pub struct TruncSplit(pub usize);

struct SplitSaved {
    dec: Svd,
    r: usize,
}

impl Primitive for TruncSplit {
    fn name(&self) -> &'static str {
        "trunc_split"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        let full = decomp::svd(x[0])?;
        let r = kept_rank(self.0, &full);
        let dec = full.truncate(full.rank().max(r))?;
        let q = dec.u.slice_axis(1, 0, r)?;
        let rr = mul_diag_left(&dec.s[..r], &dec.vh.slice_axis(0, 0, r)?);
        Ok(Forward { outputs: vec![q, rr], saved: Some(Box::new(SplitSaved { dec, r })) })
    }
    fn backward(&self, x: &[&ComplexTensor], fwd: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let SplitSaved { dec, r } = saved::<SplitSaved>(fwd);
        let r = *r;
        let (q, rr) = (&fwd.outputs[0], &fwd.outputs[1]);
        let gq = grad_or_zero(g[0], q);
        let gr = grad_or_zero(g[1], rr);
        // G = Q̄ + M R̄†
        let gg = gq.add(&ComplexTensor::gemm(x[0], Op::N, &gr, Op::H)?)?;
        let mut gm = q.matmul(&gr)?;
        let inv: Vec<f64> = dec.s[..r].iter().map(|x| 1.0 / x).collect();
        let z = project_out(&dec.u, &mul_diag_right(&gg, &inv))?;
        gm.add_assign(&z.matmul(&dec.vh.slice_axis(0, 0, r)?)?)?;
        if dec.s.len() > r {
            let y = ComplexTensor::gemm(&dec.u, Op::H, &gg, Op::N)?;
            let cross = split_cross(&dec.s, r, &y);
            gm.add_assign(&dec.u.matmul(&cross)?.matmul(&dec.vh)?)?;
        }
        Ok(vec![Some(gm)])
    }
}

/// TruncSplit of M = X·Y without forming M: QR of both factors, SVD of the core.
pub struct TruncSplitProduct(pub usize);

struct ProductSaved {
    /// Thin SVD factors of M = U diag(s) V†, restricted to the numerical rank.
    u: ComplexTensor,
    s: Vec<f64>,
    vh: ComplexTensor,
    r: usize,
}

impl Primitive for TruncSplitProduct {
    fn name(&self) -> &'static str {
        "trunc_split_product"
    }
    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        let (a, b) = (x[0], x[1]);
        if a.ndim() != 2 || b.ndim() != 2 || a.cols() != b.rows() {
            return Err(Error::Shape(format!("split product {:?} · {:?}", a.shape(), b.shape())));
        }
        let (qa, ra) = decomp::qr(a)?;
        let (qb, rb) = decomp::qr(&b.adjoint()?)?;
        let core = ComplexTensor::gemm(&ra, Op::N, &rb, Op::H)?;
        let full = decomp::svd(&core)?;
        let rank = decomp::numerical_rank(&full.s, a.rows(), b.cols());
        let r = self.0.min(rank).max(1).min(full.s.len());
        let dec = full.truncate(rank.max(r))?;
        let u = qa.matmul(&dec.u)?;
        let vh = ComplexTensor::gemm(&dec.vh, Op::N, &qb, Op::H)?;
        let q = u.slice_axis(1, 0, r)?;
        let rr = mul_diag_left(&dec.s[..r], &vh.slice_axis(0, 0, r)?);
        let saved = ProductSaved { u, s: dec.s, vh, r };
        Ok(Forward { outputs: vec![q, rr], saved: Some(Box::new(saved)) })
    }
    fn backward(&self, x: &[&ComplexTensor], fwd: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let ProductSaved { u, s, vh, r } = saved::<ProductSaved>(fwd);
        let r = *r;
        let (a, b) = (x[0], x[1]);
        let (q, rr) = (&fwd.outputs[0], &fwd.outputs[1]);
        let gq = grad_or_zero(g[0], q);
        let gr = grad_or_zero(g[1], rr);
        // M̄ = L₁R₁ + L₂R₂ (+ L₃R₃); Ā = M̄ B†, B̄ = A† M̄ factor by factor.
        let gg = gq.add(&a.matmul(&ComplexTensor::gemm(b, Op::N, &gr, Op::H)?)?)?;
        let inv: Vec<f64> = s[..r].iter().map(|x| 1.0 / x).collect();
        let z = project_out(u, &mul_diag_right(&gg, &inv))?;
        let vk = vh.slice_axis(0, 0, r)?;
        let mut lefts = vec![q.clone(), z];
        let mut rights = vec![gr, vk];
        if s.len() > r {
            let y = ComplexTensor::gemm(u, Op::H, &gg, Op::N)?;
            lefts.push(u.matmul(&split_cross(s, r, &y))?);
            rights.push(vh.clone());
        }
        let mut ga = ComplexTensor::zeros(a.shape());
        let mut gb = ComplexTensor::zeros(b.shape());
        for (l, rt) in lefts.iter().zip(&rights) {
            ga.add_assign(&l.matmul(&ComplexTensor::gemm(rt, Op::N, b, Op::H)?)?)?;
            gb.add_assign(&ComplexTensor::gemm(a, Op::H, l, Op::N)?.matmul(rt)?)?;
        }
        Ok(vec![Some(ga), Some(gb)])
    }
}

/// 1 for an all-ones helper in tests and composite ops.
pub fn ones(shape: &[usize]) -> ComplexTensor {
    ComplexTensor::zeros(shape).map(|_| ONE)
}
