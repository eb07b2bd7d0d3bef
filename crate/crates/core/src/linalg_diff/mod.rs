//! Differentiable complex linear algebra: tensors, decompositions, primitives
//! with reverse rules, and the evaluation trace.

pub mod decomp;
pub mod ops;
pub mod tensor;
mod trace;

pub use ops::{Forward, Primitive};
pub use tensor::{ComplexTensor, Op, C64, I, ONE, ZERO};
pub use trace::{gradient, Backend, Eager, Trace, Var};

use crate::error::{Error, Result};

/// H(θ) for θ of length n² (see [`ops::HermitianFromParams`] for the layout).
pub fn hermitian_from_params(theta: &[f64], n: usize) -> Result<ComplexTensor> {
    if theta.len() != n * n {
        return Err(Error::ParamShape { expected: n * n, got: theta.len() });
    }
    let t = ComplexTensor::from_real(theta, &[theta.len()])?;
    let f = ops::HermitianFromParams(n).forward(&[&t])?;
    Ok(f.outputs.into_iter().next().expect("one output"))
}

/// e^{iH} for Hermitian H.
pub fn matrix_exp(h: &ComplexTensor) -> Result<ComplexTensor> {
    Eager::new().matrix_exp(h)
}

/// Rank-limited SVD (U, S, V†).
pub fn truncated_svd(m: &ComplexTensor, rank: usize) -> Result<(ComplexTensor, Vec<f64>, ComplexTensor)> {
    let (u, s, vh) = Eager::new().truncated_svd(m, rank)?;
    Ok((u, s.data().iter().map(|z| z.re).collect(), vh))
}


#[cfg(test)]
mod tests {
    use super::testutil::*;
    use super::*;
    use std::f64::consts::PI;

    #[test]
    fn hermitian_examples() {
        let z = hermitian_from_params(&[0.0; 4], 2).unwrap();
        assert_eq!(z, ComplexTensor::zeros(&[2, 2]));
        let e1 = hermitian_from_params(&[1.0, 0.0, 0.0, 0.0], 2).unwrap();
        assert_eq!(e1.at2(0, 0), ONE);
        assert_eq!(e1.max_abs_diff(&ComplexTensor::from_fn2(2, 2, |i, j| if i == 0 && j == 0 { ONE } else { ZERO })), 0.0);
        let th: Vec<f64> = (0..64).map(|k| (k as f64 * 0.37).sin()).collect();
        let h = hermitian_from_params(&th, 8).unwrap();
        assert_eq!(h.max_abs_diff(&h.adjoint().unwrap()), 0.0);
        // Upper-triangle layout: (0,1) gets θ[n], θ[n+1]; (0,2) the next pair.
        assert_eq!(h.at2(0, 1), C64::new(th[8], th[9]));
        assert_eq!(h.at2(0, 2), C64::new(th[10], th[11]));
        assert_eq!(h.at2(1, 2), C64::new(th[8 + 2 * 7], th[8 + 2 * 7 + 1]));
        assert!(matches!(hermitian_from_params(&[0.0; 5], 2), Err(Error::ParamShape { .. })));
    }

    #[test]
    fn matrix_exp_examples() {
        let u = matrix_exp(&ComplexTensor::zeros(&[4, 4])).unwrap();
        assert!(u.max_abs_diff(&ComplexTensor::identity(4)) < 1e-15);
        let h = ComplexTensor::identity(2).scale(C64::new(PI / 2.0, 0.0));
        let u = matrix_exp(&h).unwrap();
        assert!(u.max_abs_diff(&ComplexTensor::identity(2).scale(I)) < 1e-15);
        let mut r = rng(1);
        let a = random_tensor(&mut r, &[8, 8]);
        let h = a.add(&a.adjoint().unwrap()).unwrap();
        let u = matrix_exp(&h).unwrap();
        let d = ComplexTensor::gemm(&u, Op::H, &u, Op::N).unwrap();
        assert!(d.max_abs_diff(&ComplexTensor::identity(8)) < 1e-12);
        assert!(matches!(matrix_exp(&ComplexTensor::zeros(&[2, 3])), Err(Error::Shape(_))));
    }

    #[test]
    fn truncated_svd_examples() {
        let (_, s, _) = truncated_svd(&ComplexTensor::identity(4), 4).unwrap();
        assert_eq!(s, vec![1.0; 4]);
        let m = ComplexTensor::from_fn2(4, 4, |i, j| if i == j { C64::new([3.0, 2.0, 1.0, 0.0][i], 0.0) } else { ZERO });
        let (u, s, vh) = truncated_svd(&m, 2).unwrap();
        assert_eq!(s.len(), 2);
        assert!((s[0] - 3.0).abs() < 1e-14 && (s[1] - 2.0).abs() < 1e-14);
        let us = ComplexTensor::from_fn2(4, 2, |i, j| u.at2(i, j) * s[j]);
        let err = us.matmul(&vh).unwrap().sub(&m).unwrap().frobenius();
        assert!((err - 1.0).abs() < 1e-12);
        // Numerical rank caps the output below the target.
        let (_, s, _) = truncated_svd(&m, 4).unwrap();
        assert_eq!(s.len(), 3);
    }

    #[test]
    fn truncated_svd_orthonormal_and_reconstructs() {
        let mut r = rng(5);
        for &(m, n) in &[(6, 4), (4, 7), (5, 5)] {
            let a = random_tensor(&mut r, &[m, n]);
            let (u, s, vh) = truncated_svd(&a, 10).unwrap();
            let k = s.len();
            let uu = ComplexTensor::gemm(&u, Op::H, &u, Op::N).unwrap();
            let vv = ComplexTensor::gemm(&vh, Op::N, &vh, Op::H).unwrap();
            assert!(uu.max_abs_diff(&ComplexTensor::identity(k)) < 1e-10);
            assert!(vv.max_abs_diff(&ComplexTensor::identity(k)) < 1e-10);
            let us = ComplexTensor::from_fn2(m, k, |i, j| u.at2(i, j) * s[j]);
            let rel = us.matmul(&vh).unwrap().sub(&a).unwrap().frobenius() / a.frobenius();
            assert!(rel < 1e-10);
        }
    }

    #[test]
    fn grad_sum_of_singular_values() {
        let mut r = rng(2);
        let m = random_tensor(&mut r, &[8, 8]);
        let loss = |tr: &mut Trace, v: &[Var]| {
            let (_, s, _) = tr.truncated_svd(&v[0], 8)?;
            let t = tr.sum(&s)?;
            tr.real(&t)
        };
        assert!(fd_check(&[m], &loss, 1e-6) < 1e-5);
    }

    #[test]
    fn grad_truncated_svd_gauge_invariant_projections() {
        let mut r = rng(3);
        for &(m, n, k) in &[(6, 4, 2), (4, 6, 3), (5, 5, 5), (7, 3, 3)] {
            let a = random_tensor(&mut r, &[m, n]);
            let w1 = random_tensor(&mut r, &[m, n]);
            let w2 = random_tensor(&mut r, &[m, n]);
            let w3 = random_tensor(&mut r, &[m, m]);
            // Rank-k reconstruction, U V† (phase-invariant), and the projector U U†.
            let loss = move |tr: &mut Trace, v: &[Var]| {
                let (u, s, vh) = tr.truncated_svd(&v[0], k)?;
                let kk = tr.shape(&s)[0];
                let sm = tr.reshape(&s, &[kk, 1])?;
                let ones = tr.constant(ops::ones(&[1, n]));
                let smat = tr.matmul(&sm, &ones)?;
                let svh = tr.hadamard(&smat, &vh)?;
                let rec = tr.matmul(&u, &svh)?;
                let uv = tr.matmul(&u, &vh)?;
                let uh = tr.adjoint(&u)?;
                let proj = tr.matmul(&u, &uh)?;
                let a1 = projection(tr, &rec, &w1)?;
                let a2 = projection(tr, &uv, &w2)?;
                let a3 = projection(tr, &proj, &w3)?;
                let t = tr.add(&a1, &a2)?;
                tr.add(&t, &a3)
            };
            let err = fd_check(&[a], &loss, 1e-6);
            assert!(err < 1e-5, "{}x{} rank {}: {}", m, n, k, err);
        }
    }

    #[test]
    fn grad_trunc_split_variants() {
        let mut r = rng(4);
        for &(m, p, n, k) in &[(6, 3, 5, 2), (8, 4, 6, 4), (4, 2, 9, 1), (5, 5, 5, 5)] {
            let x = random_tensor(&mut r, &[m, p]);
            let y = random_tensor(&mut r, &[p, n]);
            let w1 = random_tensor(&mut r, &[m, n]);
            let w2 = random_tensor(&mut r, &[m, m]);
            let w3 = random_tensor(&mut r, &[n, n]);
            let invariant = move |tr: &mut Trace, q: Var, rr: Var| -> Result<Var> {
                let qr = tr.matmul(&q, &rr)?;
                let qh = tr.adjoint(&q)?;
                let qq = tr.matmul(&q, &qh)?;
                let rh = tr.adjoint(&rr)?;
                let rr2 = tr.matmul(&rh, &rr)?;
                let sq = tr.hadamard(&qr, &qr)?;
                let a1 = projection(tr, &sq, &w1)?;
                let a2 = projection(tr, &qq, &w2)?;
                let a3 = projection(tr, &rr2, &w3)?;
                let t = tr.add(&a1, &a2)?;
                tr.add(&t, &a3)
            };
            let inv = &invariant;
            let direct = move |tr: &mut Trace, v: &[Var]| {
                let mm = tr.matmul(&v[0], &v[1])?;
                let (q, rr) = tr.trunc_split(&mm, k)?;
                inv(tr, q, rr)
            };
            let product = move |tr: &mut Trace, v: &[Var]| {
                let (q, rr) = tr.trunc_split_product(&v[0], &v[1], k)?;
                inv(tr, q, rr)
            };
            let e1 = fd_check(&[x.clone(), y.clone()], &direct, 1e-6);
            let e2 = fd_check(&[x.clone(), y.clone()], &product, 1e-6);
            assert!(e1 < 1e-5 && e2 < 1e-5, "{:?}: {} {}", (m, p, n, k), e1, e2);
            // Same truncation from both routes.
            let mut e = Eager::new();
            let mm = x.matmul(&y).unwrap();
            let (q1, r1) = e.trunc_split(&mm, k).unwrap();
            let (q2, r2) = e.trunc_split_product(&x, &y, k).unwrap();
            let a = q1.matmul(&r1).unwrap();
            let b = q2.matmul(&r2).unwrap();
            assert!(a.max_abs_diff(&b) < 1e-10);
        }
    }

    #[test]
    fn grad_expm_through_params() {
        let mut r = rng(6);
        let theta: Vec<f64> = (0..16).map(|_| rand::Rng::random_range(&mut r, -1.0..1.0)).collect();
        let w = random_tensor(&mut r, &[4, 4]);
        let th = ComplexTensor::from_real(&theta, &[16]).unwrap();
        let loss = move |tr: &mut Trace, v: &[Var]| {
            let re = tr.real(&v[0])?;
            let h = tr.hermitian_from_params(&re, 4)?;
            let u = tr.matrix_exp(&h)?;
            let sq = tr.hadamard(&u, &u)?;
            projection(tr, &sq, &w)
        };
        assert!(fd_check(&[th], &loss, 1e-6) < 1e-6);
    }

    #[test]
    fn grad_expm_degenerate_spectrum() {
        // θ = 0 gives a fully degenerate H; the divided differences must stay finite.
        let mut r = rng(7);
        let w = random_tensor(&mut r, &[3, 3]);
        let th = ComplexTensor::zeros(&[9]);
        let loss = move |tr: &mut Trace, v: &[Var]| {
            let re = tr.real(&v[0])?;
            let h = tr.hermitian_from_params(&re, 3)?;
            let u = tr.matrix_exp(&h)?;
            let sq = tr.hadamard(&u, &u)?;
            projection(tr, &sq, &w)
        };
        assert!(fd_check(&[th], &loss, 1e-6) < 1e-6);
    }

    #[test]
    fn grad_contract_random_three_index() {
        let mut r = rng(8);
        let a = random_tensor(&mut r, &[3, 4, 2]);
        let b = random_tensor(&mut r, &[2, 5, 3]);
        let w = random_tensor(&mut r, &[4, 5]);
        let loss = move |tr: &mut Trace, v: &[Var]| {
            let c = tr.contract(&v[0], &v[1], &[0, 2], &[2, 0])?;
            projection(tr, &c, &w)
        };
        assert!(fd_check(&[a, b], &loss, 1e-6) < 1e-6);
    }

    #[test]
    fn contract_examples() {
        let mut r = rng(9);
        let m = random_tensor(&mut r, &[3, 3]);
        let mut e = Eager::new();
        let c = e.contract(&m, &ComplexTensor::identity(3), &[1], &[0]).unwrap();
        assert_eq!(c, m);
        let x = random_tensor(&mut r, &[4]);
        let y = random_tensor(&mut r, &[4]);
        let d = e.contract(&x, &y, &[0], &[0]).unwrap();
        let expect: C64 = x.data().iter().zip(y.data()).map(|(a, b)| a * b).sum();
        assert!((d.scalar_value() - expect).norm() < 1e-14);
        assert!(matches!(e.contract(&x, &m, &[0], &[0]), Err(Error::Shape(_))));
    }

    #[test]
    fn grad_elementwise_and_structural_ops() {
        let mut r = rng(10);
        let a = random_tensor(&mut r, &[2, 3, 4]);
        let b = random_tensor(&mut r, &[2, 3, 4]);
        let s = ComplexTensor::new(vec![C64::new(1.3, -0.4)], vec![]).unwrap();
        let w = random_tensor(&mut r, &[4, 2, 3]);
        let w2 = random_tensor(&mut r, &[3]);
        let loss = move |tr: &mut Trace, v: &[Var]| {
            let c = tr.conj(&v[0])?;
            let p = tr.hadamard(&c, &v[1])?;
            let q = tr.scale(&p, C64::new(0.3, 0.7))?;
            let q = tr.add(&q, &v[0])?;
            let d = tr.div_scalar(&q, &v[2])?;
            let e = tr.permute(&d, &[2, 0, 1])?;
            let s1 = tr.slice(&e, 1, 0, 1)?;
            let s2 = tr.slice(&e, 1, 1, 1)?;
            let cat = tr.concat(&[&s2, &s1], 1)?;
            let flat = tr.reshape(&cat, &[24])?;
            let g = tr.gather(&flat, vec![3, 3, 17])?;
            let l1 = projection(tr, &cat, &w)?;
            let l2 = projection(tr, &g, &w2)?;
            tr.add(&l1, &l2)
        };
        assert!(fd_check(&[a, b, s], &loss, 1e-6) < 1e-7);
    }

    #[test]
    fn grad_log_and_sqrt() {
        let x = ComplexTensor::from_real(&[0.3, 1.7, 2.2], &[3]).unwrap();
        let loss = |tr: &mut Trace, v: &[Var]| {
            let l = tr.log_real(&v[0], 1e-300)?;
            let s = tr.sum(&l)?;
            let n = tr.sum(&v[0])?;
            let n = tr.real(&n)?;
            let r = tr.sqrt_real(&n)?;
            tr.add(&s, &r)
        };
        assert!(fd_check(&[x], &loss, 1e-6) < 1e-7);
    }

    #[test]
    fn gradient_api_examples() {
        let theta = vec![0.5, -1.5, 2.0];
        let (v, g) = gradient(&[theta.clone(), vec![3.0]], |tr, p| {
            let sq = tr.hadamard(&p[0], &p[0])?;
            let s = tr.sum(&sq)?;
            tr.real(&s)
        })
        .unwrap();
        assert!((v - 6.5).abs() < 1e-15);
        assert_eq!(g[0], vec![1.0, -3.0, 4.0]);
        assert_eq!(g[1], vec![0.0]);
    }

    #[test]
    fn non_finite_reports_location() {
        let r = gradient(&[vec![0.0]], |tr, p| {
            let l = tr.log_real(&p[0], 0.0)?;
            tr.sum(&l)
        });
        match r {
            Err(Error::NonFinite { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected non-finite error, got {:?}", other.map(|x| x.0)),
        }
    }

    #[test]
    fn trace_replays_bit_identically_and_is_deterministic() {
        let mut r = rng(11);
        let x = random_tensor(&mut r, &[6, 4]);
        let w = random_tensor(&mut r, &[6, 4]);
        let build = |tr: &mut Trace| -> (Var, Var) {
            let v = tr.param_tensor(x.clone());
            let (q, rr) = tr.trunc_split(&v, 3).unwrap();
            let m = tr.matmul(&q, &rr).unwrap();
            let l = projection(tr, &m, &w).unwrap();
            (v, l)
        };
        let mut tr = Trace::new();
        let (_, l) = build(&mut tr);
        assert!(tr.replay().unwrap());
        let g1 = tr.backward(l).unwrap();
        let g2 = tr.backward(l).unwrap();
        assert_eq!(g1, g2);
    }
}
