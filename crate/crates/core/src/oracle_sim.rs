//! Dense density-matrix reference simulator for small registers. Used to
//! produce synthetic counts from known channels and to cross-check the MPDO.

use std::collections::BTreeMap;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Binomial, Distribution};

use crate::channels::{bit_flip_channel, depolarizing_2q_channel, identity_channel, KrausSet};
use crate::circuit_io::{bitstring, Circuit, CountsDistribution, GateType};
use crate::error::{Error, Result};
use crate::linalg_diff::{Backend, ComplexTensor, Eager, ONE};
use crate::noise_model::{ChannelKey, NoisyProgram, Step};

pub const MAX_QUBITS: usize = 12;

/// Explicit channels per key.
pub type Resolver = BTreeMap<ChannelKey, KrausSet>;

#[derive(Clone, Debug)]
pub struct DenseState {
    pub n: usize,
    pub rho: ComplexTensor,
}

impl DenseState {
    pub fn zero(n: usize) -> Result<Self> {
        if n == 0 || n > MAX_QUBITS {
            return Err(Error::Resource(format!("dense simulation supports 1..={MAX_QUBITS} qubits, got {n}")));
        }
        let d = 1 << n;
        let mut rho = ComplexTensor::zeros(&[d, d]);
        rho.set2(0, 0, ONE);
        Ok(DenseState { n, rho })
    }

    pub fn trace(&self) -> f64 {
        self.rho.trace().re
    }

    /// ρ → M ρ M† for M acting on sites lo..lo+k (site 0 most significant).
    fn conjugate(&mut self, m: &ComplexTensor, lo: usize, k: usize) -> Result<()> {
        self.rho = sandwich(&self.rho, m, m, self.n, lo, k)?;
        Ok(())
    }

    pub fn apply_unitary(&mut self, u: &ComplexTensor, sites: &[usize]) -> Result<()> {
        let (lo, u) = contiguous(u, sites, self.n)?;
        self.conjugate(&u, lo, sites.len())
    }

    pub fn apply_channel(&mut self, k: &KrausSet, sites: &[usize]) -> Result<()> {
        if k.d() != 1 << sites.len() {
            return Err(Error::Shape(format!("a d={} channel cannot act on {} site(s)", k.d(), sites.len())));
        }
        let mut acc = ComplexTensor::zeros(self.rho.shape());
        for op in k.ops() {
            let (lo, op) = contiguous(op, sites, self.n)?;
            acc.add_assign(&sandwich(&self.rho, &op, &op, self.n, lo, sites.len())?)?;
        }
        self.rho = acc;
        Ok(())
    }
}

/// Brings a 1- or 2-site operator onto an ascending contiguous block.
fn contiguous(m: &ComplexTensor, sites: &[usize], n: usize) -> Result<(usize, ComplexTensor)> {
    if let Some(&s) = sites.iter().find(|&&s| s >= n) {
        return Err(Error::Shape(format!("site {s} is out of range for {n} sites")));
    }
    match sites {
        [s] => Ok((*s, m.clone())),
        [a, b] if *b == a + 1 => Ok((*a, m.clone())),
        [a, b] if *a == b + 1 => {
            let t = m.clone().reshape(&[2, 2, 2, 2])?.permute(&[1, 0, 3, 2])?;
            Ok((*b, t.reshape(&[4, 4])?))
        }
        _ => Err(Error::Shape(format!("sites {sites:?} are not a single site or adjacent pair"))),
    }
}

/// A ρ B† with A, B acting on the block [lo, lo+k).
fn sandwich(rho: &ComplexTensor, a: &ComplexTensor, bm: &ComplexTensor, n: usize, lo: usize, k: usize) -> Result<ComplexTensor> {
    let mut e = Eager::new();
    let (l, d, r) = (1usize << lo, 1usize << k, 1usize << (n - lo - k));
    let full = 1usize << n;
    let t = rho.clone().reshape(&[l, d, r * full])?;
    let t = e.contract(a, &t, &[1], &[1])?; // (d, l, r·full)
    let t = t.permute(&[1, 0, 2])?.reshape(&[full, l, d, r])?;
    let t = e.contract(&t, &bm.conj(), &[2], &[1])?; // (full, l, r, d)
    t.permute(&[0, 1, 3, 2])?.reshape(&[full, full])
}

/// Exact execution of a lowered program with explicit channels.
pub fn dense_run(program: &NoisyProgram, resolver: &Resolver) -> Result<DenseState> {
    let mut st = DenseState::zero(program.num_sites)?;
    for (idx, step) in program.steps.iter().enumerate() {
        let res = match step {
            Step::Gate { gate, sites } => st.apply_unitary(&gate.matrix(), sites),
            Step::Channel { key, sites } => match resolver.get(key) {
                Some(k) => st.apply_channel(k, sites),
                None => Err(Error::Coverage(key.to_string())),
            },
        };
        res.map_err(|e| Error::Step { step: idx, source: Box::new(e) })?;
    }
    Ok(st)
}

/// Marginal over `measured` in register order (first entry most significant).
pub fn dense_distribution(st: &DenseState, measured: &[usize]) -> Result<Vec<f64>> {
    let n = st.n;
    if let Some(&s) = measured.iter().find(|&&s| s >= n) {
        return Err(Error::Shape(format!("site {s} is out of range for {n} sites")));
    }
    let m = measured.len();
    let mut p = vec![0.0; 1 << m];
    for x in 0..1usize << n {
        let y = measured.iter().fold(0, |y, &s| (y << 1) | ((x >> (n - 1 - s)) & 1));
        p[y] += st.rho.at2(x, x).re;
    }
    Ok(p)
}

/// Multinomial counts from an exact distribution, by sequential conditional
/// binomials in index order.
pub fn multinomial_counts(p: &[f64], num_bits: usize, n_shots: u64, seed: u64) -> Result<CountsDistribution> {
    if n_shots == 0 {
        return Err(Error::Domain("n_shots must be positive".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut left = n_shots;
    let mut mass: f64 = p.iter().map(|x| x.max(0.0)).sum();
    if !(mass > 0.0) {
        return Err(Error::Numeric("distribution has no mass".into()));
    }
    let mut counts = BTreeMap::new();
    for (i, &pi) in p.iter().enumerate() {
        if left == 0 {
            break;
        }
        let pi = pi.max(0.0);
        let q = if mass > 0.0 { (pi / mass).clamp(0.0, 1.0) } else { 0.0 };
        let c = if i + 1 == p.len() || q >= 1.0 {
            left
        } else {
            Binomial::new(left, q).map_err(|e| Error::Numeric(e.to_string()))?.sample(&mut rng)
        };
        if c > 0 {
            counts.insert(bitstring(i, num_bits), c);
        }
        left -= c;
        mass -= pi;
    }
    CountsDistribution::new(num_bits, counts)
}

/// Synthetic measurement data from the dense oracle.
pub fn synth_counts(program: &NoisyProgram, resolver: &Resolver, n_shots: u64, seed: u64) -> Result<CountsDistribution> {
    let st = dense_run(program, resolver)?;
    let p = dense_distribution(&st, &program.measured)?;
    multinomial_counts(&p, program.measured.len(), n_shots, seed)
}

/// Ground-truth injection: bit-flip(p1) after every one-qubit gate,
/// depolarizing(p2) after every two-qubit gate, identity elsewhere.
pub fn injection_resolver(gate_types: &[GateType], p1: f64, p2: f64) -> Result<Resolver> {
    let mut r = Resolver::new();
    r.insert(ChannelKey::Prep, identity_channel(2));
    r.insert(ChannelKey::Meas, identity_channel(2));
    for &g in gate_types {
        let k = if g.arity() == 1 { bit_flip_channel(p1)? } else { depolarizing_2q_channel(p2)? };
        r.insert(ChannelKey::Gate(g), k);
        r.insert(ChannelKey::Crosstalk(g), identity_channel(2));
    }
    Ok(r)
}

/// Noiseless resolver: identity channels for every key of the gate types.
pub fn identity_resolver(gate_types: &[GateType]) -> Resolver {
    crate::noise_model::keys_for(gate_types).into_iter().map(|k| (k, identity_channel(k.dim()))).collect()
}

/// Statevector of a circuit with no noise; site 0 is most significant. Used
/// to check routing and gate conventions.
pub fn statevector(c: &Circuit) -> Result<Vec<crate::linalg_diff::C64>> {
    let n = c.num_qubits;
    if n == 0 || n > 20 {
        return Err(Error::Resource(format!("statevector supports 1..=20 qubits, got {n}")));
    }
    let mut e = Eager::new();
    let full = 1usize << n;
    let mut psi = ComplexTensor::zeros(&[full]);
    psi.data_mut()[0] = ONE;
    for ins in &c.instructions {
        let (lo, u) = match ins.qubits.as_slice() {
            [a, b] if a.abs_diff(*b) != 1 => {
                return Err(Error::Shape(format!("statevector needs adjacent operands, got {:?}", ins.qubits)))
            }
            qs => contiguous(&ins.gate.matrix(), qs, n)?,
        };
        let k = ins.qubits.len();
        let t = psi.reshape(&[1 << lo, 1 << k, 1 << (n - lo - k)])?;
        psi = e.contract(&u, &t, &[1], &[1])?.permute(&[1, 0, 2])?.reshape(&[full])?;
    }
    Ok(psi.into_data())
}
