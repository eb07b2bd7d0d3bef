use nalgebra::DMatrix;

use super::tensor::{ComplexTensor, Op, C64};
use crate::error::{Error, Result};

/// Hermitian eigendecomposition with ascending eigenvalues: H = Q diag(λ) Q†.
pub fn eigh(h: &ComplexTensor) -> Result<(Vec<f64>, ComplexTensor)> {
    let n = h.rows();
    if h.shape() != [n, n] {
        return Err(Error::Shape(format!("eigh needs a square matrix, got {:?}", h.shape())));
    }
    if !h.is_finite() {
        return Err(Error::Numeric("eigh input not finite".into()));
    }
    let m = h.to_matrix()?;
    let eig = nalgebra::SymmetricEigen::try_new(m, f64::EPSILON, 0)
        .ok_or_else(|| Error::Numeric("Hermitian eigensolver did not converge".into()))?;
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[a].total_cmp(&eig.eigenvalues[b]).then(a.cmp(&b)));
    let vals = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let q = ComplexTensor::from_fn2(n, n, |i, j| eig.eigenvectors[(i, order[j])]);
    Ok((vals, q))
}

/// Thin SVD M = U diag(s) V† with s descending; ties keep solver order.
pub struct Svd {
    pub u: ComplexTensor,
    pub s: Vec<f64>,
    pub vh: ComplexTensor,
}

pub fn svd(m: &ComplexTensor) -> Result<Svd> {
    if m.ndim() != 2 {
        return Err(Error::Shape(format!("svd needs a matrix, got {:?}", m.shape())));
    }
    if !m.is_finite() {
        return Err(Error::Numeric("svd input not finite".into()));
    }
    // nalgebra's bidiagonal QR occasionally returns a wrong factorization for
    // exactly rank-deficient inputs. A perturbation far below the check's
    // tolerance removes the exact degeneracy; Jacobi is the last resort.
    if let Some(d) = svd_bidiag(m) {
        if reconstructs(m, &d) {
            return Ok(d);
        }
    }
    let scale = m.max_abs();
    for attempt in 0..3 {
        let delta = 16.0 * f64::EPSILON * scale * 4f64.powi(attempt);
        if let Some(mut d) = svd_bidiag(&perturbed(m, delta, attempt as u64)) {
            // Values inside the perturbation's norm are indistinguishable from zero.
            let floor = delta * ((m.rows() * m.cols()) as f64).sqrt();
            d.s.iter_mut().filter(|x| **x <= floor).for_each(|x| *x = 0.0);
            if reconstructs(m, &d) {
                return Ok(d);
            }
        }
    }
    let d = svd_jacobi(m)?;
    if !reconstructs(m, &d) {
        return Err(Error::Numeric("svd failed to reconstruct its input".into()));
    }
    Ok(d)
}

fn svd_bidiag(m: &ComplexTensor) -> Option<Svd> {
    let (rows, cols) = (m.rows(), m.cols());
    let p = rows.min(cols);
    let mat: DMatrix<C64> = m.to_matrix().ok()?;
    let dec = nalgebra::SVD::try_new_unordered(mat, true, true, f64::EPSILON, 0)?;
    let (u, vt) = (dec.u?, dec.v_t?);
    let mut order: Vec<usize> = (0..p).collect();
    order.sort_by(|&a, &b| dec.singular_values[b].total_cmp(&dec.singular_values[a]).then(a.cmp(&b)));
    let s = order.iter().map(|&i| dec.singular_values[i].max(0.0)).collect();
    let u = ComplexTensor::from_fn2(rows, p, |i, j| u[(i, order[j])]);
    let vh = ComplexTensor::from_fn2(p, cols, |i, j| vt[(order[i], j)]);
    Some(Svd { u, s, vh })
}

/// M plus a deterministic pseudo-random matrix with entries in ±δ/2.
fn perturbed(m: &ComplexTensor, delta: f64, stream: u64) -> ComplexTensor {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(((m.rows() as u64) << 32 | m.cols() as u64) ^ stream);
    let mut out = m.clone();
    for z in out.data_mut() {
        *z += C64::new(rng.random::<f64>() - 0.5, rng.random::<f64>() - 0.5) * delta;
    }
    out
}

fn reconstructs(m: &ComplexTensor, d: &Svd) -> bool {
    if !d.s.iter().all(|x| x.is_finite()) || !d.u.is_finite() || !d.vh.is_finite() {
        return false;
    }
    let p = d.s.len();
    let scale = m.max_abs().max(f64::MIN_POSITIVE);
    let tol = 64.0 * f64::EPSILON * (m.rows().max(m.cols()) as f64);
    let us = ComplexTensor::from_fn2(m.rows(), p, |i, j| d.u.at2(i, j) * d.s[j]);
    let rec_ok = match us.matmul(&d.vh) {
        Ok(r) => r.max_abs_diff(m) <= tol * scale,
        Err(_) => false,
    };
    let id = ComplexTensor::identity(p);
    let orth = |a: &ComplexTensor, op_l, op_r| {
        ComplexTensor::gemm(a, op_l, a, op_r).map(|g| g.max_abs_diff(&id) <= tol).unwrap_or(false)
    };
    rec_ok && orth(&d.u, Op::H, Op::N) && orth(&d.vh, Op::N, Op::H)
}

/// One-sided (Hestenes) Jacobi SVD after a QR step. Slower than bidiagonalization
/// but accurate on rank-deficient and graded inputs.
pub fn svd_jacobi(m: &ComplexTensor) -> Result<Svd> {
    let (rows, cols) = (m.rows(), m.cols());
    if rows < cols {
        let t = svd_jacobi(&m.adjoint()?)?;
        return Ok(Svd { u: t.vh.adjoint()?, s: t.s, vh: t.u.adjoint()? });
    }
    let n = cols;
    let (q, r) = qr(m)?;
    // Columns of w start as the columns of R; v accumulates the rotations.
    let mut w: Vec<C64> = (0..n * n).map(|k| r.at2(k % n, k / n)).collect();
    let mut v: Vec<C64> = (0..n * n).map(|k| if k % n == k / n { C64::new(1.0, 0.0) } else { C64::new(0.0, 0.0) }).collect();
    let tol = f64::EPSILON * n as f64;
    // Columns this small sit below roundoff of the whole matrix; rotating
    // against them only churns.
    let total: f64 = w.iter().map(|z| z.norm_sqr()).sum();
    let negligible = total * f64::EPSILON * f64::EPSILON * f64::EPSILON;
    for _ in 0..100 {
        let mut rotated = false;
        for a in 0..n {
            for b in a + 1..n {
                let (alpha, beta, gamma) = {
                    let (ca, cb) = (&w[a * n..(a + 1) * n], &w[b * n..(b + 1) * n]);
                    let mut g = C64::new(0.0, 0.0);
                    let (mut x, mut y) = (0.0, 0.0);
                    for k in 0..n {
                        x += ca[k].norm_sqr();
                        y += cb[k].norm_sqr();
                        g += ca[k].conj() * cb[k];
                    }
                    (x, y, g)
                };
                let g = gamma.norm();
                if g == 0.0 || alpha.min(beta) <= negligible || g <= tol * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * g);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                let e = gamma.conj() / g;
                rotate(&mut w, n, a, b, c, s, e);
                rotate(&mut v, n, a, b, c, s, e);
            }
        }
        if !rotated {
            break;
        }
    }
    // Without convergence the caller's reconstruction check rejects the result.
    let norms: Vec<f64> = (0..n).map(|j| w[j * n..(j + 1) * n].iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt()).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| norms[b].total_cmp(&norms[a]).then(a.cmp(&b)));
    let s: Vec<f64> = order.iter().map(|&j| norms[j]).collect();
    // Left vectors of R. Columns at roundoff level are completed as null
    // space; the rest are re-orthogonalized, which moves the product by at
    // most eps·s₀.
    let floor = s.first().copied().unwrap_or(0.0) * f64::EPSILON * rows as f64;
    let mut ur: Vec<Vec<C64>> = Vec::with_capacity(n);
    for (k, &j) in order.iter().enumerate() {
        if s[k] > floor {
            let mut x: Vec<C64> = w[j * n..(j + 1) * n].iter().map(|z| z / s[k]).collect();
            for _ in 0..2 {
                for b in &ur {
                    let proj: C64 = b.iter().zip(&x).map(|(bi, xi)| bi.conj() * xi).sum();
                    for (xi, bi) in x.iter_mut().zip(b) {
                        *xi -= proj * bi;
                    }
                }
            }
            let nrm = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            ur.push(x.into_iter().map(|z| z / nrm).collect());
        } else {
            ur.push(complete_basis(&ur, n));
        }
    }
    let ur_t = ComplexTensor::from_fn2(n, n, |i, k| ur[k][i]);
    let u = q.matmul(&ur_t)?;
    let vh = ComplexTensor::from_fn2(n, n, |k, i| v[order[k] * n + i].conj());
    Ok(Svd { u, s, vh })
}

fn rotate(x: &mut [C64], len: usize, a: usize, b: usize, c: f64, s: f64, e: C64) {
    let (lo, hi) = x.split_at_mut(b * len);
    let ca = &mut lo[a * len..(a + 1) * len];
    let cb = &mut hi[..len];
    for k in 0..len {
        let (p, q) = (ca[k], cb[k] * e);
        ca[k] = p * c - q * s;
        cb[k] = p * s + q * c;
    }
}

/// A unit vector orthogonal to `basis`, by Gram-Schmidt over coordinate vectors.
fn complete_basis(basis: &[Vec<C64>], n: usize) -> Vec<C64> {
    let mut best = vec![C64::new(0.0, 0.0); n];
    let mut best_norm = -1.0;
    for k in 0..n {
        let mut x = vec![C64::new(0.0, 0.0); n];
        x[k] = C64::new(1.0, 0.0);
        for _ in 0..2 {
            for b in basis {
                let proj: C64 = b.iter().zip(&x).map(|(bi, xi)| bi.conj() * xi).sum();
                for (xi, bi) in x.iter_mut().zip(b) {
                    *xi -= proj * bi;
                }
            }
        }
        let nrm = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nrm > best_norm {
            best_norm = nrm;
            best = x.iter().map(|z| z / nrm).collect();
        }
        if nrm > 0.5 {
            break;
        }
    }
    best
}

/// Count of singular values above max(m, n)·eps·s₀.
pub fn numerical_rank(s: &[f64], m: usize, n: usize) -> usize {
    let Some(&s0) = s.first() else { return 0 };
    if s0 <= 0.0 {
        return 0;
    }
    let tol = (m.max(n) as f64) * f64::EPSILON * s0;
    s.iter().take_while(|&&x| x > tol).count()
}

impl Svd {
    pub fn rank(&self) -> usize {
        numerical_rank(&self.s, self.u.rows(), self.vh.cols())
    }

    /// Keeps the leading `k` triplets.
    pub fn truncate(&self, k: usize) -> Result<Svd> {
        Ok(Svd {
            u: self.u.slice_axis(1, 0, k)?,
            s: self.s[..k].to_vec(),
            vh: self.vh.slice_axis(0, 0, k)?,
        })
    }
}

/// Thin QR: M (m×n) = Q (m×p) R (p×n), p = min(m, n).
pub fn qr(m: &ComplexTensor) -> Result<(ComplexTensor, ComplexTensor)> {
    if m.ndim() != 2 {
        return Err(Error::Shape(format!("qr needs a matrix, got {:?}", m.shape())));
    }
    let dec = m.to_matrix()?.qr();
    Ok((ComplexTensor::from_matrix(&dec.q()), ComplexTensor::from_matrix(&dec.r())))
}

/// Lorentzian-broadened 1/x.
pub fn broadened_inverse(x: f64, eps: f64) -> f64 {
    x / (x * x + eps)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rand_mat(r: usize, c: usize, seed: u64) -> ComplexTensor {
        let mut s = seed;
        let mut next = move || {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((s >> 11) as f64) / (1u64 << 53) as f64 - 0.5
        };
        ComplexTensor::from_fn2(r, c, |_, _| C64::new(next(), next()))
    }

    #[test]
    fn svd_reconstructs_and_sorts() {
        for &(r, c) in &[(6, 4), (4, 6), (5, 5)] {
            let m = rand_mat(r, c, 7);
            let d = svd(&m).unwrap();
            assert!(d.s.windows(2).all(|w| w[0] >= w[1]));
            let us = ComplexTensor::from_fn2(r, d.s.len(), |i, j| d.u.at2(i, j) * d.s[j]);
            let rec = us.matmul(&d.vh).unwrap();
            assert!(rec.max_abs_diff(&m) < 1e-12);
        }
    }

    fn low_rank(r: usize, k: usize, c: usize, seed: u64) -> ComplexTensor {
        rand_mat(r, k, seed).matmul(&rand_mat(k, c, seed + 1)).unwrap()
    }

    #[test]
    fn svd_handles_rank_deficient_inputs() {
        for seed in 0..300u64 {
            for &(r, k, c) in &[(4, 2, 9), (9, 2, 4), (6, 1, 6), (16, 3, 32), (8, 8, 8)] {
                let m = low_rank(r, k, c, seed * 7);
                let d = svd(&m).unwrap();
                assert!(reconstructs(&m, &d), "seed {seed} shape {r}x{c}");
                assert_eq!(d.rank(), k.min(r).min(c));
            }
        }
    }

    #[test]
    fn jacobi_on_graded_spectrum() {
        // Singular values spanning 27 decades, as left behind by repeated truncation.
        for seed in 0..50u64 {
            let (qa, _) = qr(&rand_mat(4, 4, seed)).unwrap();
            let (qb, _) = qr(&rand_mat(4, 4, seed + 100)).unwrap();
            let s = [1.4, 5.7e-4, 3e-20, 2e-27];
            let m = ComplexTensor::from_fn2(4, 4, |i, j| qa.at2(i, j) * s[j]).matmul(&qb.adjoint().unwrap()).unwrap();
            let d = svd_jacobi(&m).unwrap();
            assert!(reconstructs(&m, &d), "seed {seed}");
            assert!(reconstructs(&m, &svd(&m).unwrap()));
        }
    }

    #[test]
    fn jacobi_matches_bidiagonal_values() {
        for &(r, c) in &[(7, 3), (3, 7), (6, 6)] {
            let m = rand_mat(r, c, 21);
            let a = svd_jacobi(&m).unwrap();
            let b = svd_bidiag(&m).unwrap();
            assert!(reconstructs(&m, &a));
            for (x, y) in a.s.iter().zip(&b.s) {
                assert!((x - y).abs() < 1e-12);
            }
        }
        let z = ComplexTensor::zeros(&[3, 2]);
        let d = svd_jacobi(&z).unwrap();
        assert!(reconstructs(&z, &d));
    }

    #[test]
    fn eigh_ascending_and_orthonormal() {
        let a = rand_mat(5, 5, 3);
        let h = a.add(&a.adjoint().unwrap()).unwrap();
        let (vals, q) = eigh(&h).unwrap();
        assert!(vals.windows(2).all(|w| w[0] <= w[1]));
        let qq = ComplexTensor::gemm(&q, super::super::tensor::Op::H, &q, super::super::tensor::Op::N).unwrap();
        assert!(qq.max_abs_diff(&ComplexTensor::identity(5)) < 1e-12);
    }

    #[test]
    fn qr_reconstructs() {
        let m = rand_mat(7, 3, 11);
        let (q, r) = qr(&m).unwrap();
        assert_eq!(q.shape(), &[7, 3]);
        assert!(q.matmul(&r).unwrap().max_abs_diff(&m) < 1e-12);
    }

    #[test]
    fn rank_ignores_roundoff() {
        assert_eq!(numerical_rank(&[1.0, 0.5, 1e-20, 0.0], 4, 4), 2);
        assert_eq!(numerical_rank(&[0.0, 0.0], 2, 2), 0);
    }
}
