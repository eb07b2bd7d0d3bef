//! Matrix product density operator. Site i holds A[l, s, a, r] (left bond,
//! physical, inner, right bond) and ρ = Tr_inner |Ψ⟩⟨Ψ| with Ψ the chain
//! contraction of all sites. Every routine except sampling and dense
//! reconstruction is written against [`Backend`], so the same code runs
//! eagerly or on a gradient trace.

use std::collections::{BTreeMap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::channels::{kraus_tensor, KrausSet};
use crate::circuit_io::{bitstring, CountsDistribution, Gate};
use crate::error::{Error, Result};
use crate::linalg_diff::{Backend, ComplexTensor, Eager, ONE};
use crate::noise_model::{ChannelKey, NoiseModel, NoisyProgram, Step};
use crate::par::{self, Exec};

/// Largest register `to_dense` will build.
pub const DENSE_MAX_QUBITS: usize = 12;

/// Deviation beyond which a probability is reported as clamped.
pub const CLAMP_WARN: f64 = 1e-8;

/// How a routing SWAP is applied.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SwapMode {
    /// Sites trade places together with their inner indices. More accurate
    /// under truncation, but the split costs O((χ·κ)³).
    #[default]
    Purification,
    /// SWAP as a unitary on the physical indices; the split costs O(χ³).
    Physical,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SimConfig {
    pub chi: usize,
    pub kappa: usize,
    pub renormalize: bool,
    pub seed: u64,
    pub swap: SwapMode,
}

impl SimConfig {
    /// κ = 2χ, renormalization on, purification SWAPs.
    pub fn new(chi: usize) -> Self {
        SimConfig { chi, kappa: 2 * chi, renormalize: true, seed: 0, swap: SwapMode::Purification }
    }

    pub fn with_kappa(mut self, kappa: usize) -> Self {
        self.kappa = kappa;
        self
    }

    pub fn with_swap(mut self, swap: SwapMode) -> Self {
        self.swap = swap;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.chi < 2 {
            return Err(Error::Config(format!("chi must be at least 2, got {}", self.chi)));
        }
        if self.kappa < 1 {
            return Err(Error::Config("kappa must be at least 1".into()));
        }
        Ok(())
    }
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig::new(8)
    }
}

#[derive(Clone, Debug)]
pub struct MpdoState<T> {
    pub sites: Vec<T>,
    pub config: SimConfig,
    /// Orthogonality center: sites to its left are left-isometric over
    /// (l, s, a), sites to its right right-isometric over (s, a, r). Kraus
    /// maps and unitaries keep this form, and every truncation happens at
    /// the center where singular values are the true Schmidt weights.
    pub center: usize,
}

impl<T> MpdoState<T> {
    pub fn len(&self) -> usize {
        self.sites.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sites.is_empty()
    }
}

impl MpdoState<ComplexTensor> {
    pub fn bond_dims(&self) -> Vec<usize> {
        self.sites.iter().skip(1).map(|a| a.shape()[0]).collect()
    }

    pub fn inner_dims(&self) -> Vec<usize> {
        self.sites.iter().map(|a| a.shape()[2]).collect()
    }
}

/// |0…0⟩⟨0…0| with every bond and inner dimension 1.
pub fn init_product_state<B: Backend>(b: &mut B, n: usize, config: SimConfig) -> Result<MpdoState<B::T>> {
    if n == 0 {
        return Err(Error::Domain("the register must have at least one qubit".into()));
    }
    config.validate()?;
    let mut zero = ComplexTensor::zeros(&[1, 2, 1, 1]);
    zero.data_mut()[0] = ONE;
    let sites = (0..n).map(|_| b.constant(zero.clone())).collect();
    Ok(MpdoState { sites, config, center: 0 })
}

fn check_site(n: usize, i: usize) -> Result<()> {
    if i >= n {
        return Err(Error::Shape(format!("site {i} is out of range for {n} sites")));
    }
    Ok(())
}

/// Left site of an adjacent pair and whether the operands are reversed.
fn pair(n: usize, sites: &[usize]) -> Result<(usize, bool)> {
    if sites.len() != 2 {
        return Err(Error::Shape(format!("two-site operation needs 2 sites, got {}", sites.len())));
    }
    check_site(n, sites[0])?;
    check_site(n, sites[1])?;
    match (sites[0], sites[1]) {
        (a, b) if b == a + 1 => Ok((a, false)),
        (a, b) if a == b + 1 => Ok((b, true)),
        (a, b) => Err(Error::Shape(format!("sites {a} and {b} are not adjacent"))),
    }
}

/// Kraus tensor (N, d, d) of any op; a d×d unitary counts as N = 1.
fn as_kraus<B: Backend>(b: &mut B, k: &B::T, d: usize) -> Result<B::T> {
    let s = b.shape(k);
    match s.as_slice() {
        [r, c] if *r == d && *c == d => b.reshape(k, &[1, d, d]),
        [_, r, c] if *r == d && *c == d => Ok(k.clone()),
        _ => Err(Error::Shape(format!("expected a {d}x{d} operator or (N,{d},{d}) Kraus tensor, got {s:?}"))),
    }
}

fn apply_1site<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, k: &B::T, site: usize, truncate: bool) -> Result<()> {
    check_site(st.len(), site)?;
    let k = as_kraus(b, k, 2)?;
    let nk = b.shape(&k)[0];
    if truncate && nk > 1 {
        move_center(b, st, site)?;
    }
    let a = &st.sites[site];
    let [l, _, ai, r] = dims4(&b.shape(a));
    // (N, s', l, a, r) → (l, s', N, a, r)
    let t = b.contract(&k, a, &[2], &[1])?;
    let t = b.permute(&t, &[2, 1, 0, 3, 4])?;
    let t = b.reshape(&t, &[l, 2, nk * ai, r])?;
    st.sites[site] = if truncate && nk > 1 { inner_truncate(b, &t, st.config.kappa)? } else { t };
    Ok(())
}

fn dims4(s: &[usize]) -> [usize; 4] {
    [s[0], s[1], s[2], s[3]]
}

/// Shifts the orthogonality center to `target` one bond at a time.
fn move_center<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, target: usize) -> Result<()> {
    check_site(st.len(), target)?;
    while st.center < target {
        let c = st.center;
        let [l, s, a, r] = dims4(&b.shape(&st.sites[c]));
        let m = b.reshape(&st.sites[c], &[l * s * a, r])?;
        let (q, rr) = b.trunc_split(&m, usize::MAX)?;
        let k = b.shape(&q)[1];
        st.sites[c] = b.reshape(&q, &[l, s, a, k])?;
        st.sites[c + 1] = b.contract(&rr, &st.sites[c + 1], &[1], &[0])?;
        st.center += 1;
    }
    while st.center > target {
        let c = st.center;
        let [l, s, a, r] = dims4(&b.shape(&st.sites[c]));
        let m = b.reshape(&st.sites[c], &[l, s * a * r])?;
        let mh = b.adjoint(&m)?;
        let (qh, rh) = b.trunc_split(&mh, usize::MAX)?;
        let k = b.shape(&qh)[1];
        let q = b.adjoint(&qh)?;
        st.sites[c] = b.reshape(&q, &[k, s, a, r])?;
        let lr = b.adjoint(&rh)?; // (l, k)
        st.sites[c - 1] = b.contract(&st.sites[c - 1], &lr, &[3], &[0])?;
        st.center -= 1;
    }
    Ok(())
}

/// Compresses the inner index to at most κ. Only R of the split is kept:
/// ρ depends on the inner index through R†R alone.
fn inner_truncate<B: Backend>(b: &mut B, a: &B::T, kappa: usize) -> Result<B::T> {
    let [l, s, ai, r] = dims4(&b.shape(a));
    if ai == 1 {
        return Ok(a.clone());
    }
    let m = b.permute(a, &[2, 0, 1, 3])?;
    let m = b.reshape(&m, &[ai, l * s * r])?;
    let (_, rr) = b.trunc_split(&m, kappa)?;
    let k = b.shape(&rr)[0];
    let t = b.reshape(&rr, &[k, l, s, r])?;
    b.permute(&t, &[1, 2, 0, 3])
}

/// Largest divisor of n not above √n, so n = k1·k2 with k1 ≤ k2 ≤ ⌈√n⌉ when n is square.
fn factor_kraus(n: usize) -> (usize, usize) {
    let k1 = (1..=n).take_while(|k| k * k <= n).filter(|k| n % k == 0).last().unwrap_or(1);
    (k1, n / k1)
}

fn apply_2site<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, k: &B::T, sites: &[usize]) -> Result<()> {
    let (i, reversed) = pair(st.len(), sites)?;
    move_center(b, st, i)?;
    let k = as_kraus(b, k, 4)?;
    let nk = b.shape(&k)[0];
    // K as (N, s1', s2', s1, s2) with s1 on the left site.
    let k5 = b.reshape(&k, &[nk, 2, 2, 2, 2])?;
    let k5 = if reversed { b.permute(&k5, &[0, 2, 1, 4, 3])? } else { k5 };
    let (chi, kappa) = (st.config.chi, st.config.kappa);

    let [l, _, a1, m] = dims4(&b.shape(&st.sites[i]));
    let [_, _, a2, r] = dims4(&b.shape(&st.sites[i + 1]));
    // Isolate the bond-facing parts of both sites: X = Qx·Rx with Qx isometric.
    let x = b.permute(&st.sites[i], &[0, 2, 1, 3])?;
    let x = b.reshape(&x, &[l * a1, 2 * m])?;
    let (qx, rx) = b.trunc_split(&x, usize::MAX)?;
    let p = b.shape(&rx)[0];
    // The right factor must be co-isometric so the core carries the weights:
    // split Y† and read Y = (R_h)† (Q_h)†.
    let y = b.reshape(&st.sites[i + 1], &[m * 2, a2 * r])?;
    let yh = b.adjoint(&y)?;
    let (qh, rh) = b.trunc_split(&yh, usize::MAX)?;
    let qy = b.adjoint(&rh)?;
    let ry = b.adjoint(&qh)?;
    let p2 = b.shape(&qy)[1];

    let rx = b.reshape(&rx, &[p, 2, m])?;
    let qy = b.reshape(&qy, &[m, 2, p2])?;
    let theta = b.contract(&rx, &qy, &[2], &[0])?; // (p, s1, s2, p2)
    let t = b.contract(&k5, &theta, &[3, 4], &[1, 2])?; // (N, s1', s2', p, p2)
    let (k1, k2) = factor_kraus(nk);
    let t = b.reshape(&t, &[k1, k2, 2, 2, p, p2])?;
    let t = b.permute(&t, &[4, 2, 0, 3, 1, 5])?; // (p, s1, k1, s2, k2, p2)
    let t = b.reshape(&t, &[p * 2 * k1, 2 * k2 * p2])?;
    let (qc, rc) = b.trunc_split(&t, chi)?;
    let c = b.shape(&qc)[1];

    let qx = b.reshape(&qx, &[l, a1, p])?;
    let qc = b.reshape(&qc, &[p, 2 * k1 * c])?;
    let left = b.contract(&qx, &qc, &[2], &[0])?;
    let left = b.reshape(&left, &[l, a1, 2, k1, c])?;
    let left = b.permute(&left, &[0, 2, 3, 1, 4])?;
    let left = b.reshape(&left, &[l, 2, k1 * a1, c])?;

    let rc = b.reshape(&rc, &[c * 2 * k2, p2])?;
    let right = b.matmul(&rc, &ry)?;
    let right = b.reshape(&right, &[c, 2, k2 * a2, r])?;

    st.sites[i] = left;
    st.sites[i + 1] = right;
    st.center = i + 1;
    if nk > 1 {
        st.sites[i + 1] = inner_truncate(b, &st.sites[i + 1], kappa)?;
        move_center(b, st, i)?;
        st.sites[i] = inner_truncate(b, &st.sites[i], kappa)?;
    }
    Ok(())
}

/// Exchanges two neighboring qubits together with their inner indices, so a
/// qubit keeps its own purification as it moves along the chain.
fn swap_sites<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, sites: &[usize]) -> Result<()> {
    let (i, _) = pair(st.len(), sites)?;
    move_center(b, st, i)?;
    let [l, _, a1, _] = dims4(&b.shape(&st.sites[i]));
    let [_, _, a2, r] = dims4(&b.shape(&st.sites[i + 1]));
    let t = b.contract(&st.sites[i], &st.sites[i + 1], &[3], &[0])?; // (l, s1, a1, s2, a2, r)
    let t = b.permute(&t, &[0, 3, 4, 1, 2, 5])?;
    let t = b.reshape(&t, &[l * 2 * a2, 2 * a1 * r])?;
    let (q, rr) = b.trunc_split(&t, st.config.chi)?;
    let c = b.shape(&q)[1];
    st.sites[i] = b.reshape(&q, &[l, 2, a2, c])?;
    st.sites[i + 1] = b.reshape(&rr, &[c, 2, a1, r])?;
    st.center = i + 1;
    Ok(())
}

/// Unitary conjugation by a 2×2 or 4×4 matrix. For two sites the first
/// entry of `sites` is the gate's more significant operand.
pub fn apply_gate<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, gate: &B::T, sites: &[usize]) -> Result<()> {
    match sites.len() {
        1 => apply_1site(b, st, gate, sites[0], false)?,
        2 => apply_2site(b, st, gate, sites)?,
        n => return Err(Error::Shape(format!("gates act on 1 or 2 sites, got {n}"))),
    }
    maybe_renormalize(b, st)
}

/// Exchanges the qubits on two neighboring sites as set by the state's
/// [`SwapMode`].
pub fn apply_swap<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, sites: &[usize]) -> Result<()> {
    swap(b, st, sites)?;
    maybe_renormalize(b, st)
}

fn swap<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, sites: &[usize]) -> Result<()> {
    match st.config.swap {
        SwapMode::Purification => swap_sites(b, st, sites),
        SwapMode::Physical => {
            let u = b.constant(Gate::Swap.matrix());
            apply_2site(b, st, &u, sites)
        }
    }
}

/// Absorbs a (N, 2, 2) Kraus tensor at one site.
pub fn apply_channel_1site<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, k: &B::T, site: usize) -> Result<()> {
    apply_1site(b, st, k, site, true)?;
    maybe_renormalize(b, st)
}

/// Absorbs a (N, 4, 4) Kraus tensor on an adjacent pair.
pub fn apply_channel_2site<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>, k: &B::T, sites: &[usize]) -> Result<()> {
    apply_2site(b, st, k, sites)?;
    maybe_renormalize(b, st)
}

/// Eager convenience for a [`KrausSet`].
pub fn apply_kraus(st: &mut MpdoState<ComplexTensor>, k: &KrausSet, sites: &[usize]) -> Result<()> {
    let mut e = Eager::new();
    let t = k.to_tensor();
    match (sites.len(), k.d()) {
        (1, 2) => apply_channel_1site(&mut e, st, &t, sites[0]),
        (2, 4) => apply_channel_2site(&mut e, st, &t, sites),
        (n, d) => Err(Error::Shape(format!("a d={d} channel cannot act on {n} site(s)"))),
    }
}

fn maybe_renormalize<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>) -> Result<()> {
    if st.config.renormalize {
        renormalize(b, st)?;
    }
    Ok(())
}

/// Scales site 0 by 1/√Tr ρ.
pub fn renormalize<B: Backend>(b: &mut B, st: &mut MpdoState<B::T>) -> Result<()> {
    let tr = trace(b, st)?;
    if !(b.value(&tr).scalar_value().re > 0.0) {
        return Err(Error::Numeric("state has vanishing trace".into()));
    }
    let s = b.sqrt_real(&tr)?;
    st.sites[0] = b.div_scalar(&st.sites[0], &s)?;
    Ok(())
}

fn ones<B: Backend>(b: &mut B, shape: &[usize]) -> B::T {
    let n = shape.iter().product();
    b.constant(ComplexTensor::new(vec![ONE; n], shape.to_vec()).expect("shape"))
}

/// Left environment step over one traced site; env is (P, ket, bra).
fn trace_site<B: Backend>(b: &mut B, env: &B::T, a: &B::T) -> Result<B::T> {
    let ac = b.conj(a)?;
    let t = b.contract(env, a, &[1], &[0])?;
    b.contract(&t, &ac, &[1, 2, 3], &[0, 1, 2])
}

/// Left environment step projecting one site on |v⟩.
fn project_site<B: Backend>(b: &mut B, env: &B::T, a: &B::T, v: usize) -> Result<B::T> {
    let av = b.slice(a, 1, v, 1)?;
    trace_site(b, env, &av)
}

/// Tr ρ as a scalar.
pub fn trace<B: Backend>(b: &mut B, st: &MpdoState<B::T>) -> Result<B::T> {
    let mut env = ones(b, &[1, 1, 1]);
    for a in &st.sites {
        env = trace_site(b, &env, a)?;
    }
    let t = b.reshape(&env, &[1])?;
    b.real(&t)
}

fn check_measured(n: usize, measured: &[usize]) -> Result<()> {
    let mut seen = vec![false; n];
    for &s in measured {
        check_site(n, s)?;
        if std::mem::replace(&mut seen[s], true) {
            return Err(Error::Shape(format!("site {s} measured twice")));
        }
    }
    Ok(())
}

/// For each register index (first measured site most significant), its
/// index in chain order. None when the orders coincide.
fn register_permutation(measured: &[usize]) -> Option<Vec<usize>> {
    let m = measured.len();
    let mut sorted = measured.to_vec();
    sorted.sort_unstable();
    if sorted == measured {
        return None;
    }
    let rank: Vec<usize> = measured.iter().map(|s| sorted.binary_search(s).expect("present")).collect();
    Some(
        (0..1usize << m)
            .map(|x| {
                (0..m).fold(0, |y, j| {
                    let bit = (x >> (m - 1 - j)) & 1;
                    y | (bit << (m - 1 - rank[j]))
                })
            })
            .collect(),
    )
}

/// Marginal distribution of `measured` (register order, first entry most
/// significant) with other sites traced out. Real vector of length 2^m.
pub fn probabilities<B: Backend>(b: &mut B, st: &MpdoState<B::T>, measured: &[usize]) -> Result<B::T> {
    check_measured(st.len(), measured)?;
    if measured.len() > 24 {
        return Err(Error::Resource(format!("{} measured sites exceed the 24-bit table limit", measured.len())));
    }
    let mut is_meas = vec![false; st.len()];
    for &s in measured {
        is_meas[s] = true;
    }
    let mut env = ones(b, &[1, 1, 1]);
    for (i, a) in st.sites.iter().enumerate() {
        if !is_meas[i] {
            env = trace_site(b, &env, a)?;
            continue;
        }
        let s = b.shape(&env);
        let r = b.shape(a)[3];
        let mut parts = Vec::with_capacity(2);
        for v in 0..2 {
            let e = project_site(b, &env, a, v)?;
            parts.push(b.reshape(&e, &[s[0], 1, r, r])?);
        }
        let e = b.concat(&[&parts[0], &parts[1]], 1)?;
        env = b.reshape(&e, &[2 * s[0], r, r])?;
    }
    let n = b.shape(&env)[0];
    let p = b.reshape(&env, &[n])?;
    let p = b.real(&p)?;
    match register_permutation(measured) {
        Some(idx) => b.gather(&p, idx),
        None => Ok(p),
    }
}

/// p(bits) for one outcome of `measured`; `bits[j]` belongs to `measured[j]`.
pub fn probability<B: Backend>(b: &mut B, st: &MpdoState<B::T>, bits: &[u8], measured: &[usize]) -> Result<B::T> {
    check_measured(st.len(), measured)?;
    if bits.len() != measured.len() || bits.iter().any(|&v| v > 1) {
        return Err(Error::Shape(format!("{} bits for {} measured sites", bits.len(), measured.len())));
    }
    let mut fixed = vec![None; st.len()];
    for (&s, &v) in measured.iter().zip(bits) {
        fixed[s] = Some(v as usize);
    }
    let mut env = ones(b, &[1, 1, 1]);
    for (a, f) in st.sites.iter().zip(&fixed) {
        env = match f {
            Some(v) => project_site(b, &env, a, *v)?,
            None => trace_site(b, &env, a)?,
        };
    }
    let p = b.reshape(&env, &[1])?;
    b.real(&p)
}

/// Clamps a probability table to [0, 1], warning on deviations above
/// [`CLAMP_WARN`]. Returns the clamped values and how many were clamped.
pub fn clamp_probabilities(p: &[f64]) -> (Vec<f64>, usize) {
    let mut flagged = 0;
    let out = p
        .iter()
        .map(|&x| {
            let c = x.clamp(0.0, 1.0);
            if (c - x).abs() > CLAMP_WARN {
                flagged += 1;
            }
            c
        })
        .collect();
    if flagged > 0 {
        log::warn!("{flagged} probabilities fell outside [0, 1] by more than {CLAMP_WARN:e} and were clamped");
    }
    (out, flagged)
}

/// Shots per independent sampling chunk.
const SHOT_CHUNK: usize = 512;

/// Draws `n_shots` bitstrings by sequential conditional sampling along the
/// chain. Shot k uses its own ChaCha8 stream (k) of `seed`, so the counts do
/// not depend on `exec`.
pub fn sample(st: &MpdoState<ComplexTensor>, measured: &[usize], n_shots: u64, seed: u64, exec: Exec) -> Result<CountsDistribution> {
    check_measured(st.len(), measured)?;
    if n_shots == 0 {
        return Err(Error::Domain("n_shots must be positive".into()));
    }
    if measured.is_empty() {
        return Err(Error::Domain("nothing to sample: no measured sites".into()));
    }
    let sampler = Sampler::new(st, measured)?;
    let chunks: Vec<(u64, u64)> =
        (0..n_shots).step_by(SHOT_CHUNK).map(|s| (s, (s + SHOT_CHUNK as u64).min(n_shots))).collect();
    let partial = par::map(exec, &chunks, |&(lo, hi)| sampler.draw(lo..hi, seed));
    let mut counts: BTreeMap<String, u64> = BTreeMap::new();
    for part in partial {
        for (k, v) in part? {
            *counts.entry(k).or_insert(0) += v;
        }
    }
    CountsDistribution::new(measured.len(), counts)
}

struct Sampler<'a> {
    sites: &'a [ComplexTensor],
    measured: &'a [usize],
    /// Measured sites in chain order.
    chain: Vec<usize>,
    /// right[i]: sites i.. traced, as (ket, bra).
    right: Vec<ComplexTensor>,
}

struct Node {
    /// Environments after projecting on 0 and 1, carried to the next measured site.
    env: [ComplexTensor; 2],
    p0: f64,
}

impl<'a> Sampler<'a> {
    fn new(st: &'a MpdoState<ComplexTensor>, measured: &'a [usize]) -> Result<Self> {
        let mut e = Eager::new();
        let n = st.len();
        let mut right = vec![ComplexTensor::zeros(&[1, 1]); n + 1];
        right[n] = ComplexTensor::new(vec![ONE], vec![1, 1])?;
        for i in (0..n).rev() {
            let a = &st.sites[i];
            let t = e.contract(a, &right[i + 1], &[3], &[0])?;
            right[i] = e.contract(&t, &a.conj(), &[1, 2, 3], &[1, 2, 3])?;
        }
        let mut chain = measured.to_vec();
        chain.sort_unstable();
        Ok(Sampler { sites: &st.sites, measured, chain, right })
    }

    /// Environment (1, ket, bra) from site `from` up to (not including) `to`, all traced.
    fn carry(&self, e: &mut Eager, mut env: ComplexTensor, from: usize, to: usize) -> Result<ComplexTensor> {
        for a in &self.sites[from..to] {
            env = trace_site(e, &env, a)?;
        }
        Ok(env)
    }

    /// Unnormalized probabilities of both values of chain-order bit k, with
    /// the environments carried to the next measured site.
    fn branch(&self, e: &mut Eager, env: &ComplexTensor, k: usize) -> Result<[(ComplexTensor, f64); 2]> {
        let site = self.chain[k];
        let next = self.chain.get(k + 1).copied().unwrap_or(self.sites.len());
        let mut go = |v: usize| -> Result<(ComplexTensor, f64)> {
            let ev = project_site(e, env, &self.sites[site], v)?;
            let ev = self.carry(e, ev, site + 1, next)?;
            let p = ev.real_dot(&self.right[next]).max(0.0);
            Ok((ev, p))
        };
        Ok([go(0)?, go(1)?])
    }

    fn expand(&self, e: &mut Eager, env: &ComplexTensor, k: usize) -> Result<Node> {
        let [(e0, p0), (e1, p1)] = self.branch(e, env, k)?;
        let tot = p0 + p1;
        let p0 = if tot > 0.0 { p0 / tot } else { 0.5 };
        Ok(Node { env: [e0, e1], p0 })
    }

    fn root(&self, e: &mut Eager) -> Result<ComplexTensor> {
        let start = ComplexTensor::new(vec![ONE], vec![1, 1, 1])?;
        self.carry(e, start, 0, self.chain[0])
    }

    /// Chain-order bits to a register index (first measured entry most significant).
    fn register_index(&self, bits: u64) -> usize {
        let m = self.chain.len();
        self.measured.iter().enumerate().fold(0, |acc, (j, site)| {
            let pos = self.chain.binary_search(site).expect("present");
            acc | (((bits >> (m - 1 - pos)) & 1) as usize) << (m - 1 - j)
        })
    }

    fn draw(&self, shots: std::ops::Range<u64>, seed: u64) -> Result<HashMap<String, u64>> {
        let mut e = Eager::new();
        let m = self.chain.len();
        let root_env = self.root(&mut e)?;
        // Prefix tree keyed by (depth, chain-order bits).
        let mut memo: HashMap<(usize, u64), Node> = HashMap::new();
        let mut counts = HashMap::new();
        for shot in shots {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(shot);
            let mut bits = 0u64;
            for k in 0..m {
                if !memo.contains_key(&(k, bits)) {
                    let env = if k == 0 { &root_env } else { &memo[&(k - 1, bits >> 1)].env[(bits & 1) as usize] };
                    let node = self.expand(&mut e, env, k)?;
                    memo.insert((k, bits), node);
                }
                let u: f64 = rng.random();
                let v = u64::from(u >= memo[&(k, bits)].p0);
                bits = (bits << 1) | v;
            }
            let s = bitstring(self.register_index(bits), m);
            *counts.entry(s).or_insert(0) += 1;
        }
        Ok(counts)
    }
}

/// The `k` most probable outcomes of `measured` found by beam search over
/// prefix marginals along the chain, as (register index, probability) in
/// descending order. Exact when k ≥ 2^m; otherwise a prefix that looks
/// unlikely early can fall off the beam.
pub fn top_outcomes(st: &MpdoState<ComplexTensor>, measured: &[usize], k: usize) -> Result<Vec<(usize, f64)>> {
    check_measured(st.len(), measured)?;
    if measured.is_empty() || k == 0 {
        return Ok(Vec::new());
    }
    if measured.len() > 63 {
        return Err(Error::Resource(format!("{} measured sites exceed the 63-bit index limit", measured.len())));
    }
    let sampler = Sampler::new(st, measured)?;
    let mut e = Eager::new();
    let mut beam = vec![(0u64, sampler.root(&mut e)?, 1.0)];
    for depth in 0..measured.len() {
        let mut next = Vec::with_capacity(2 * beam.len());
        for (bits, env, _) in &beam {
            for (v, (ev, p)) in sampler.branch(&mut e, env, depth)?.into_iter().enumerate() {
                next.push(((bits << 1) | v as u64, ev, p));
            }
        }
        next.sort_by(|a, b| b.2.total_cmp(&a.2).then(a.0.cmp(&b.0)));
        next.truncate(k);
        beam = next;
    }
    Ok(beam.into_iter().map(|(bits, _, p)| (sampler.register_index(bits), p)).collect())
}

/// Full 2ⁿ×2ⁿ density matrix; site 0 is the most significant bit.
pub fn to_dense(st: &MpdoState<ComplexTensor>) -> Result<ComplexTensor> {
    let n = st.len();
    if n > DENSE_MAX_QUBITS {
        return Err(Error::Resource(format!("{n} qubits exceed the dense limit of {DENSE_MAX_QUBITS}")));
    }
    let mut e = Eager::new();
    // env[D, D', r, r']
    let mut env = ComplexTensor::new(vec![ONE], vec![1, 1, 1, 1])?;
    for a in &st.sites {
        let s = env.shape().to_vec();
        let r = a.shape()[3];
        let t = e.contract(&env, a, &[2], &[0])?; // (D, D', r', s, a, r2)
        let t = e.contract(&t, &a.conj(), &[2, 4], &[0, 2])?; // (D, D', s, r2, s', r2')
        let t = t.permute(&[0, 2, 1, 4, 3, 5])?;
        env = t.reshape(&[s[0] * 2, s[1] * 2, r, r])?;
    }
    let d = 1usize << n;
    env.reshape(&[d, d])
}

/// Kraus tensors for every channel the program uses, built from θ leaves
/// supplied by the caller (trace parameters or constants).
pub fn kraus_tensors<B: Backend>(
    b: &mut B,
    program: &NoisyProgram,
    n_kraus: usize,
    theta: &BTreeMap<ChannelKey, B::T>,
) -> Result<BTreeMap<ChannelKey, B::T>> {
    program
        .channel_keys()
        .into_iter()
        .map(|k| {
            let t = theta.get(&k).ok_or_else(|| Error::Coverage(k.to_string()))?;
            Ok((k, kraus_tensor(b, t, k.dim(), n_kraus)?))
        })
        .collect()
}

/// Executes a lowered program. Steps run without intermediate
/// renormalization; with the flag on the final state is scaled to unit
/// trace, which gives the same state since truncation commutes with scaling.
pub fn run<B: Backend>(
    b: &mut B,
    program: &NoisyProgram,
    kraus: &BTreeMap<ChannelKey, B::T>,
    config: SimConfig,
) -> Result<MpdoState<B::T>> {
    let mut st = init_product_state(b, program.num_sites, config)?;
    for (idx, step) in program.steps.iter().enumerate() {
        let res = match step {
            Step::Gate { gate: Gate::Swap, sites } => swap(b, &mut st, sites),
            Step::Gate { gate, sites } => {
                let u = b.constant(gate.matrix());
                match sites.len() {
                    1 => apply_1site(b, &mut st, &u, sites[0], false),
                    _ => apply_2site(b, &mut st, &u, sites),
                }
            }
            Step::Channel { key, sites } => match kraus.get(key) {
                None => Err(Error::Coverage(key.to_string())),
                Some(k) if sites.len() == 1 => apply_1site(b, &mut st, k, sites[0], true),
                Some(k) => apply_2site(b, &mut st, k, sites),
            },
        };
        res.map_err(|e| Error::Step { step: idx, source: Box::new(e) })?;
    }
    if config.renormalize {
        renormalize(b, &mut st)?;
    }
    Ok(st)
}

/// Eager run with a parameterized model.
pub fn run_model(program: &NoisyProgram, model: &NoiseModel, config: SimConfig) -> Result<MpdoState<ComplexTensor>> {
    let mut e = Eager::new();
    let theta = model
        .channels()
        .iter()
        .map(|(k, p)| Ok((*k, ComplexTensor::from_real(p.theta(), &[p.theta().len()])?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let kraus = kraus_tensors(&mut e, program, model.n_kraus(), &theta)?;
    run(&mut e, program, &kraus, config)
}

/// Eager run with explicit Kraus sets per key.
pub fn run_kraus(program: &NoisyProgram, sets: &BTreeMap<ChannelKey, KrausSet>, config: SimConfig) -> Result<MpdoState<ComplexTensor>> {
    let kraus = sets.iter().map(|(k, s)| (*k, s.to_tensor())).collect();
    run(&mut Eager::new(), program, &kraus, config)
}

/// Eager probability table as plain reals.
pub fn probability_table(st: &MpdoState<ComplexTensor>, measured: &[usize]) -> Result<Vec<f64>> {
    let p = probabilities(&mut Eager::new(), st, measured)?;
    Ok(p.data().iter().map(|z| z.re).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::channels::{bit_flip_channel, depolarizing_2q_channel, identity_channel};

    fn fresh(n: usize, chi: usize) -> MpdoState<ComplexTensor> {
        init_product_state(&mut Eager::new(), n, SimConfig::new(chi)).unwrap()
    }

    fn gate(st: &mut MpdoState<ComplexTensor>, g: Gate, sites: &[usize]) {
        apply_gate(&mut Eager::new(), st, &g.matrix(), sites).unwrap();
    }

    fn kron_all(ms: &[ComplexTensor]) -> ComplexTensor {
        ms.iter().skip(1).fold(ms[0].clone(), |acc, m| acc.kron(m).unwrap())
    }

    #[test]
    fn product_state_basics() {
        let st = fresh(3, 2);
        let rho = to_dense(&st).unwrap();
        assert_eq!(rho.at2(0, 0), ONE);
        assert!((rho.norm_sqr() - 1.0).abs() < 1e-15);
        assert_eq!(probability_table(&fresh(1, 2), &[0]).unwrap(), vec![1.0, 0.0]);
        assert!(init_product_state(&mut Eager::new(), 0, SimConfig::new(2)).is_err());
        assert!(init_product_state(&mut Eager::new(), 2, SimConfig::new(1)).is_err());
    }

    #[test]
    fn bell_state_and_register_order() {
        let mut st = fresh(3, 4);
        gate(&mut st, Gate::H, &[0]);
        gate(&mut st, Gate::Cx, &[0, 1]);
        gate(&mut st, Gate::X, &[2]);
        let p = probability_table(&st, &[0, 1]).unwrap();
        for (x, want) in p.iter().zip([0.5, 0.0, 0.0, 0.5]) {
            assert!((x - want).abs() < 1e-12);
        }
        // q2 = 1 is the most significant register bit here.
        let p = probability_table(&st, &[2, 0]).unwrap();
        for (x, want) in p.iter().zip([0.0, 0.0, 0.5, 0.5]) {
            assert!((x - want).abs() < 1e-12);
        }
        let one = probability(&mut Eager::new(), &st, &[1, 1, 1], &[2, 1, 0]).unwrap();
        assert!((one.scalar_value().re - 0.5).abs() < 1e-12);
    }

    #[test]
    fn reversed_operands_match_dense() {
        let mut st = fresh(2, 4);
        gate(&mut st, Gate::H, &[1]);
        gate(&mut st, Gate::Cx, &[1, 0]);
        gate(&mut st, Gate::Sx, &[0]);
        let h = Gate::H.matrix();
        let i2 = ComplexTensor::identity(2);
        let swap = Gate::Swap.matrix();
        let cx10 = swap.matmul(&Gate::Cx.matrix()).unwrap().matmul(&swap).unwrap();
        let u = kron_all(&[Gate::Sx.matrix(), i2.clone()]).matmul(&cx10).unwrap().matmul(&kron_all(&[i2, h])).unwrap();
        let mut psi0 = ComplexTensor::zeros(&[4, 4]);
        psi0.set2(0, 0, ONE);
        let want = u.matmul(&psi0).unwrap().matmul(&u.adjoint().unwrap()).unwrap();
        assert!(to_dense(&st).unwrap().max_abs_diff(&want) < 1e-12);
    }

    #[test]
    fn channels_on_small_states() {
        let mut st = fresh(1, 2);
        apply_kraus(&mut st, &bit_flip_channel(0.5).unwrap(), &[0]).unwrap();
        let p = probability_table(&st, &[0]).unwrap();
        assert!((p[0] - 0.5).abs() < 1e-12 && (p[1] - 0.5).abs() < 1e-12);

        let mut st = fresh(2, 8);
        gate(&mut st, Gate::H, &[0]);
        let before = probability_table(&st, &[0, 1]).unwrap();
        apply_kraus(&mut st, &identity_channel(4), &[0, 1]).unwrap();
        apply_kraus(&mut st, &identity_channel(2), &[1]).unwrap();
        let after = probability_table(&st, &[0, 1]).unwrap();
        for (a, b) in before.iter().zip(&after) {
            assert!((a - b).abs() < 1e-12);
        }

        let mut st = fresh(2, 8);
        let dep = depolarizing_2q_channel(0.5).unwrap();
        apply_kraus(&mut st, &dep, &[0, 1]).unwrap();
        let mut rho = ComplexTensor::zeros(&[4, 4]);
        rho.set2(0, 0, ONE);
        let want = dep.apply(&rho).unwrap();
        let got = to_dense(&st).unwrap();
        assert!(got.max_abs_diff(&want) < 1e-12);
        assert!(got.max_abs_diff(&got.adjoint().unwrap()) < 1e-15);
    }

    #[test]
    fn kraus_index_factoring() {
        assert_eq!(factor_kraus(1), (1, 1));
        assert_eq!(factor_kraus(4), (2, 2));
        assert_eq!(factor_kraus(2), (1, 2));
        assert_eq!(factor_kraus(9), (3, 3));
        assert_eq!(factor_kraus(6), (2, 3));
    }

    #[test]
    fn site_errors() {
        let mut st = fresh(3, 2);
        let mut e = Eager::new();
        assert!(apply_gate(&mut e, &mut st, &Gate::Cz.matrix(), &[0, 2]).is_err());
        assert!(apply_gate(&mut e, &mut st, &Gate::X.matrix(), &[3]).is_err());
        assert!(apply_gate(&mut e, &mut st, &Gate::X.matrix(), &[0, 1]).is_err());
        assert!(probabilities(&mut e, &st, &[0, 0]).is_err());
        assert!(probabilities(&mut e, &st, &[5]).is_err());
    }

    #[test]
    fn sampling_is_stream_stable() {
        let mut st = fresh(2, 4);
        gate(&mut st, Gate::H, &[0]);
        gate(&mut st, Gate::Cx, &[0, 1]);
        let a = sample(&st, &[0, 1], 4000, 7, Exec::Sequential).unwrap();
        let b = sample(&st, &[0, 1], 4000, 7, Exec::Parallel).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.total_shots(), 4000);
        assert!(a.counts().keys().all(|k| k == "00" || k == "11"));
        let det = sample(&fresh(3, 2), &[2, 1, 0], 50, 1, Exec::Sequential).unwrap();
        assert_eq!(det.counts().get("000"), Some(&50));
    }

    #[test]
    fn beam_search_finds_the_most_likely_outcomes() {
        let mut st = fresh(3, 8);
        gate(&mut st, Gate::H, &[0]);
        gate(&mut st, Gate::Cx, &[0, 1]);
        gate(&mut st, Gate::Sx, &[2]);
        apply_kraus(&mut st, &bit_flip_channel(0.1).unwrap(), &[1]).unwrap();
        let measured = [2, 0, 1];
        let table = probability_table(&st, &measured).unwrap();
        let mut order: Vec<usize> = (0..8).collect();
        order.sort_by(|&a, &b| table[b].total_cmp(&table[a]).then(a.cmp(&b)));
        let all = top_outcomes(&st, &measured, 8).unwrap();
        for ((idx, p), want) in all.iter().zip(&order) {
            assert_eq!(idx, want);
            assert!((p - table[*want]).abs() < 1e-12);
        }
        let top2 = top_outcomes(&st, &measured, 2).unwrap();
        assert_eq!(top2.iter().map(|t| t.0).collect::<Vec<_>>(), order[..2].to_vec());
    }
}
