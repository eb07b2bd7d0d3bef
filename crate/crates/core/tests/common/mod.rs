#![allow(dead_code)]

use nalgebra::DMatrix;
use noisefit::channels::{kraus_from_params, ChannelParams};
use noisefit::circuit_io::{Circuit, Gate, GateType};
use noisefit::linalg_diff::{ComplexTensor, C64};
use noisefit::noise_model::keys_for;
use noisefit::oracle_sim::Resolver;
use rand::Rng;

/// Random circuit on a chain: two-qubit gates only on neighbors, every
/// qubit measured.
pub fn random_circuit(n: usize, depth: usize, rng: &mut impl Rng) -> Circuit {
    let mut c = Circuit::new(n, n);
    for _ in 0..depth {
        let q = rng.random_range(0..n);
        let two = n > 1 && rng.random_bool(0.35);
        if two {
            let a = rng.random_range(0..n - 1);
            let (a, b) = if rng.random_bool(0.5) { (a, a + 1) } else { (a + 1, a) };
            c.push(if rng.random_bool(0.5) { Gate::Cz } else { Gate::Cx }, &[a, b]);
        } else {
            let g = match rng.random_range(0..4) {
                0 => Gate::Sx,
                1 => Gate::Rz(rng.random_range(-3.0..3.0)),
                2 => Gate::X,
                _ => Gate::H,
            };
            c.push(g, &[q]);
        }
    }
    c.measure_all();
    c
}

/// Random CPTP channel for every key of `types`.
pub fn random_resolver(types: &[GateType], n_kraus: usize, sigma: f64, rng: &mut impl Rng) -> Resolver {
    keys_for(types)
        .into_iter()
        .map(|k| (k, kraus_from_params(&ChannelParams::random(k.dim(), n_kraus, sigma, rng).unwrap()).unwrap()))
        .collect()
}

pub fn tv(p: &[f64], q: &[f64]) -> f64 {
    p.iter().zip(q).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0
}

pub fn to_na(t: &ComplexTensor) -> DMatrix<C64> {
    DMatrix::from_fn(t.rows(), t.cols(), |i, j| t.at2(i, j))
}

/// Smallest eigenvalue of a Hermitian matrix.
pub fn min_eig(t: &ComplexTensor) -> f64 {
    let m = to_na(t);
    let h = (&m + m.adjoint()) * C64::new(0.5, 0.0);
    h.symmetric_eigenvalues().iter().copied().fold(f64::INFINITY, f64::min)
}
