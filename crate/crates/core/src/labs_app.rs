//! LABS with single-layer QAOA wrapped in a parity-check detection scheme.
//!
//! Two ancillas copy the global Z and X parities of the data register before
//! the phase separator and uncopy them after it. The LABS cost commutes with
//! both parities, so a clean run leaves both ancillas in |0⟩ and any
//! parity-flipping error inside the phase separator is flagged.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::Serialize;

use crate::channels::{entanglement_fidelity_vs_identity, identity_channel, KrausSet};
use crate::circuit_io::{greedy_ordering, route_to_chain, Circuit, CountsDistribution, CouplingMap, Gate, GateType};
use crate::error::{Error, Result};
use crate::mpdo::{self, SimConfig, SwapMode};
use crate::noise_model::{lower_with, ChannelKey, NoiseModel, NoisyProgram, Step};
use crate::par::{self, Exec};

/// Beyond this many data qubits the random-sequence baseline is sampled
/// rather than enumerated.
const EXACT_RANDOM_MAX_N: usize = 20;
const RANDOM_SAMPLES: u64 = 1 << 16;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct QaoaParams {
    pub gamma: f64,
    pub beta: f64,
}

impl QaoaParams {
    pub fn new(gamma: f64, beta: f64) -> Result<Self> {
        if !gamma.is_finite() || !beta.is_finite() {
            return Err(Error::Domain(format!("QAOA angles must be finite, got γ={gamma}, β={beta}")));
        }
        Ok(QaoaParams { gamma, beta })
    }
}

fn check_signs(s: &[i8]) -> Result<()> {
    match s.iter().find(|&&x| x != 1 && x != -1) {
        Some(x) => Err(Error::Domain(format!("sequence entries must be ±1, got {x}"))),
        None => Ok(()),
    }
}

/// E(s) = Σ_k C_k², C_k = Σ_i s_i s_{i+k}.
pub fn labs_energy(s: &[i8]) -> Result<i64> {
    check_signs(s)?;
    Ok(energy_unchecked(s))
}

fn energy_unchecked(s: &[i8]) -> i64 {
    let n = s.len();
    (1..n)
        .map(|k| {
            let c: i64 = (0..n - k).map(|i| (s[i] * s[i + k]) as i64).sum();
            c * c
        })
        .sum()
}

/// N²/(2E). A zero-energy sequence (only possible for N = 1) gives
/// `f64::INFINITY`, which callers report as an infinite merit.
pub fn merit_factor(s: &[i8]) -> Result<f64> {
    let e = labs_energy(s)?;
    let n = s.len() as f64;
    Ok(if e == 0 { f64::INFINITY } else { n * n / (2.0 * e as f64) })
}

/// Sequence for a measured bitstring, s_i = 1 − 2 z_i.
pub fn sequence_of(bits: &str) -> Vec<i8> {
    bits.bytes().map(|b| if b == b'1' { -1 } else { 1 }).collect()
}

fn sequence_of_index(z: usize, n: usize) -> Vec<i8> {
    (0..n).map(|i| if z >> (n - 1 - i) & 1 == 1 { -1 } else { 1 }).collect()
}

/// Ising form of E under s_i → Z_i: products of Z over each index set with
/// integer coefficients. The constant term is dropped.
pub fn ising_terms(n: usize) -> BTreeMap<Vec<usize>, i64> {
    let mut terms = BTreeMap::new();
    for k in 1..n {
        for i in 0..n - k {
            for j in 0..n - k {
                // Z² = 1, so indices that appear twice drop out.
                let mut set = BTreeSet::new();
                for q in [i, i + k, j, j + k] {
                    if !set.remove(&q) {
                        set.insert(q);
                    }
                }
                if !set.is_empty() {
                    *terms.entry(set.into_iter().collect()).or_insert(0) += 1;
                }
            }
        }
    }
    terms
}

/// The parity-check circuit with the positions needed to post-select it.
#[derive(Clone, Debug)]
pub struct ParityCircuit {
    pub circuit: Circuit,
    pub n: usize,
    /// Qubit holding the Z-parity (CZ chain).
    pub z_ancilla: usize,
    /// Qubit holding the X-parity (CNOT chain).
    pub x_ancilla: usize,
    /// Instruction range of the phase separator.
    pub phase_separator: Range<usize>,
}

impl ParityCircuit {
    /// Register positions (0 = most significant) of the two ancillas.
    pub fn ancilla_positions(&self) -> Vec<usize> {
        let reg = self.circuit.register();
        [self.z_ancilla, self.x_ancilla]
            .iter()
            .map(|a| reg.iter().position(|&(q, _)| q == *a).expect("ancillas are measured"))
            .collect()
    }

    /// Two-qubit gates that carry noise, i.e. the phase-separator CZs.
    pub fn noisy_cz_count(&self) -> usize {
        self.circuit.instructions.iter().filter(|i| !i.synthetic && i.gate == Gate::Cz).count()
    }
}

/// Data qubits 0..N, Z ancilla N, X ancilla N+1; qubit q is measured into
/// bit q. Every gate outside the phase separator is marked synthetic, so it
/// stays noiseless when lowered; inside it only the CZs are noisy.
pub fn build_qaoa_parity_circuit(n: usize, params: QaoaParams) -> Result<ParityCircuit> {
    if n < 2 {
        return Err(Error::Domain(format!("LABS needs N ≥ 2, got {n}")));
    }
    let (az, ax) = (n, n + 1);
    let mut c = Circuit::new(n + 2, n + 2);
    for q in 0..n + 2 {
        c.push_synthetic(Gate::H, &[q]);
    }
    for q in (0..n).rev() {
        c.push_synthetic(Gate::Cz, &[az, q]);
        c.push_synthetic(Gate::Cx, &[ax, q]);
    }

    let start = c.instructions.len();
    for (set, coef) in ising_terms(n) {
        let cx = |c: &mut Circuit, a: usize, b: usize| {
            c.push_synthetic(Gate::H, &[b]);
            c.push(Gate::Cz, &[a, b]);
            c.push_synthetic(Gate::H, &[b]);
        };
        for w in set.windows(2) {
            cx(&mut c, w[0], w[1]);
        }
        // e^{−iγc Z_S}: the ladder maps the parity of S onto its last qubit.
        c.push_synthetic(Gate::Rz(2.0 * params.gamma * coef as f64), &[*set.last().expect("non-empty term")]);
        for w in set.windows(2).rev() {
            cx(&mut c, w[0], w[1]);
        }
    }
    let phase_separator = start..c.instructions.len();

    // Undo in mirror order: per qubit the X copy comes off before the Z copy.
    for q in 0..n {
        c.push_synthetic(Gate::Cx, &[ax, q]);
        c.push_synthetic(Gate::Cz, &[az, q]);
    }
    for q in 0..n {
        c.push_synthetic(Gate::H, &[q]);
        c.push_synthetic(Gate::Rz(2.0 * params.beta), &[q]);
        c.push_synthetic(Gate::H, &[q]);
    }
    c.push_synthetic(Gate::H, &[az]);
    c.push_synthetic(Gate::H, &[ax]);
    c.measure_all();
    Ok(ParityCircuit { circuit: c, n, z_ancilla: az, x_ancilla: ax, phase_separator })
}

/// Routes onto a chain and lowers so that only the noisy CZs carry a
/// `Gate(Cz)` channel; no other channels are emitted.
pub fn lower_parity_circuit(pc: &ParityCircuit) -> Result<NoisyProgram> {
    let routed = route_to_chain(&pc.circuit, &greedy_ordering(&pc.circuit)?)?;
    let mut prog = lower_with(&routed, &CouplingMap::linear(routed.num_qubits), |_| true)?;
    prog.steps.retain(|s| match s {
        Step::Gate { .. } => true,
        Step::Channel { key, .. } => *key == ChannelKey::Gate(GateType::Cz),
    });
    Ok(prog)
}

#[derive(Clone, Debug)]
pub struct PostSelection {
    /// Counts with both ancilla bits removed; `None` when nothing passed.
    pub accepted: Option<CountsDistribution>,
    pub acceptance_rate: f64,
}

/// Keeps the shots whose ancilla bits all read 0 and strips those bits.
pub fn postselect(counts: &CountsDistribution, ancilla_positions: &[usize]) -> Result<PostSelection> {
    let w = counts.num_bits();
    if let Some(p) = ancilla_positions.iter().find(|&&p| p >= w) {
        return Err(Error::Domain(format!("ancilla position {p} outside a {w}-bit register")));
    }
    let mut kept = BTreeMap::new();
    for (bits, &c) in counts.counts() {
        let b = bits.as_bytes();
        if ancilla_positions.iter().all(|&p| b[p] == b'0') {
            let data: String = bits.chars().enumerate().filter(|(i, _)| !ancilla_positions.contains(i)).map(|(_, ch)| ch).collect();
            *kept.entry(data).or_insert(0) += c;
        }
    }
    let n_acc: u64 = kept.values().sum();
    let width = w - ancilla_positions.iter().collect::<BTreeSet<_>>().len();
    let accepted = if kept.is_empty() { None } else { Some(CountsDistribution::new(width, kept)?) };
    Ok(PostSelection { accepted, acceptance_rate: n_acc as f64 / counts.total_shots() as f64 })
}

/// Sample mean and its standard error.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct MeanStat {
    pub mean: f64,
    pub stderr: f64,
    pub samples: u64,
}

impl MeanStat {
    fn nan() -> Self {
        MeanStat { mean: f64::NAN, stderr: f64::NAN, samples: 0 }
    }
}

/// Merit-factor statistics with `data` selecting the register positions
/// that form the sequence. Their order does not matter for the value since
/// E is invariant under reversal.
pub fn merit_stats(counts: &CountsDistribution, data: &[usize]) -> Result<MeanStat> {
    let (mut s1, mut s2, mut n) = (0.0, 0.0, 0u64);
    for (bits, &c) in counts.counts() {
        let b = bits.as_bytes();
        let seq: Vec<i8> = data.iter().map(|&p| if b[p] == b'1' { -1 } else { 1 }).collect();
        let f = merit_factor(&seq)?;
        s1 += f * c as f64;
        s2 += f * f * c as f64;
        n += c;
    }
    if n == 0 {
        return Ok(MeanStat::nan());
    }
    let mean = s1 / n as f64;
    let var = if n > 1 { ((s2 - n as f64 * mean * mean) / (n - 1) as f64).max(0.0) } else { 0.0 };
    Ok(MeanStat { mean, stderr: (var / n as f64).sqrt(), samples: n })
}

/// Mean merit factor of a uniformly random sequence: exact up to N = 20,
/// otherwise a seeded Monte Carlo estimate.
pub fn random_merit(n: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    if n <= EXACT_RANDOM_MAX_N {
        let total: f64 = (0..1usize << n).map(|z| mf_unchecked(&sequence_of_index(z, n))).sum();
        return total / (1u64 << n) as f64;
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let total: f64 = (0..RANDOM_SAMPLES)
        .map(|_| {
            let s: Vec<i8> = (0..n).map(|_| if rng.random::<bool>() { 1 } else { -1 }).collect();
            mf_unchecked(&s)
        })
        .sum();
    total / RANDOM_SAMPLES as f64
}

fn mf_unchecked(s: &[i8]) -> f64 {
    let e = energy_unchecked(s);
    let n = s.len() as f64;
    if e == 0 {
        f64::INFINITY
    } else {
        n * n / (2.0 * e as f64)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabsConfig {
    pub shots: u64,
    pub chi: usize,
    pub kappa: usize,
    pub seed: u64,
    pub exec: Exec,
}

impl Default for LabsConfig {
    fn default() -> Self {
        LabsConfig { shots: 16384, chi: 32, kappa: 32, seed: 0, exec: Exec::default_for_build() }
    }
}

impl LabsConfig {
    /// Routing SWAPs act on physical indices only: the all-to-all cost
    /// terms need hundreds of them, and moving inner indices along costs
    /// O((χκ)³) per SWAP.
    pub fn sim(&self) -> SimConfig {
        SimConfig::new(self.chi).with_kappa(self.kappa).with_swap(SwapMode::Physical)
    }

    /// Seed for one N, so rows do not depend on which other N are run.
    pub fn seed_for(&self, n: usize) -> u64 {
        self.seed ^ (n as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct FeasibilityRow {
    pub n: usize,
    pub gamma: f64,
    pub beta: f64,
    pub noisy_cz: usize,
    pub shots: u64,
    pub acceptance_rate: f64,
    pub merit_accepted: MeanStat,
    pub merit_raw: MeanStat,
    pub merit_noiseless: MeanStat,
    pub merit_random: f64,
    /// (1 − r)^{#CZ} with r the CZ channel's entanglement infidelity: the
    /// chance that no CZ in the phase separator errs.
    pub error_free_estimate: f64,
}

impl FeasibilityRow {
    pub const CSV_HEADER: &'static str = "n,gamma,beta,noisy_cz,shots,acceptance_rate,merit_accepted,merit_accepted_se,merit_raw,merit_raw_se,merit_noiseless,merit_noiseless_se,merit_random,error_free_estimate";

    pub fn csv(&self) -> String {
        let f = |x: f64| format!("{x:.16e}");
        [
            self.n.to_string(),
            f(self.gamma),
            f(self.beta),
            self.noisy_cz.to_string(),
            self.shots.to_string(),
            f(self.acceptance_rate),
            f(self.merit_accepted.mean),
            f(self.merit_accepted.stderr),
            f(self.merit_raw.mean),
            f(self.merit_raw.stderr),
            f(self.merit_noiseless.mean),
            f(self.merit_noiseless.stderr),
            f(self.merit_random),
            f(self.error_free_estimate),
        ]
        .join(",")
    }
}

/// Samples the parity-check circuit under a given CZ channel.
pub fn sample_parity_circuit(pc: &ParityCircuit, cz: &KrausSet, config: &LabsConfig, seed: u64) -> Result<CountsDistribution> {
    let prog = lower_parity_circuit(pc)?;
    let sets = BTreeMap::from([(ChannelKey::Gate(GateType::Cz), cz.clone())]);
    let st = mpdo::run_kraus(&prog, &sets, config.sim())?;
    mpdo::sample(&st, &prog.measured, config.shots, seed, config.exec)
}

/// One row per N: acceptance and merit statistics under `model`'s CZ
/// channel, applied only to phase-separator CZs.
pub fn feasibility_report(
    n_list: &[usize],
    params: &[QaoaParams],
    model: &NoiseModel,
    config: &LabsConfig,
) -> Result<Vec<FeasibilityRow>> {
    let cz = model.kraus(ChannelKey::Gate(GateType::Cz)).map_err(|_| Error::Coverage("noise model has no CZ channel".into()))?;
    feasibility_report_kraus(n_list, params, &cz, config)
}

/// [`feasibility_report`] with an explicit CZ channel.
pub fn feasibility_report_kraus(
    n_list: &[usize],
    params: &[QaoaParams],
    cz: &KrausSet,
    config: &LabsConfig,
) -> Result<Vec<FeasibilityRow>> {
    if n_list.len() != params.len() {
        return Err(Error::Shape(format!("{} values of N but {} angle pairs", n_list.len(), params.len())));
    }
    if cz.d() != 4 {
        return Err(Error::Shape(format!("CZ channel must act on two qubits, got d={}", cz.d())));
    }
    if config.shots == 0 {
        return Err(Error::Domain("shots must be positive".into()));
    }
    config.sim().validate()?;
    let jobs: Vec<(usize, QaoaParams)> = n_list.iter().copied().zip(params.iter().copied()).collect();
    let infid = 1.0 - entanglement_fidelity_vs_identity(cz);
    par::map(config.exec, &jobs, |&(n, p)| feasibility_row(n, p, cz, infid, config)).into_iter().collect()
}

fn feasibility_row(n: usize, p: QaoaParams, cz: &KrausSet, infid: f64, config: &LabsConfig) -> Result<FeasibilityRow> {
    let pc = build_qaoa_parity_circuit(n, p)?;
    let seed = config.seed_for(n);
    let anc = pc.ancilla_positions();
    let data: Vec<usize> = (0..n + 2).filter(|i| !anc.contains(i)).collect();

    let noisy = sample_parity_circuit(&pc, cz, config, seed)?;
    let clean = sample_parity_circuit(&pc, &identity_channel(4), config, seed)?;
    let sel = postselect(&noisy, &anc)?;
    let merit_accepted = match &sel.accepted {
        Some(acc) => merit_stats(acc, &(0..n).collect::<Vec<_>>())?,
        None => MeanStat::nan(),
    };
    let noisy_cz = pc.noisy_cz_count();
    Ok(FeasibilityRow {
        n,
        gamma: p.gamma,
        beta: p.beta,
        noisy_cz,
        shots: config.shots,
        acceptance_rate: sel.acceptance_rate,
        merit_accepted,
        merit_raw: merit_stats(&noisy, &data)?,
        merit_noiseless: merit_stats(&clean, &data)?,
        merit_random: random_merit(n, seed),
        error_free_estimate: (1.0 - infid.clamp(0.0, 1.0)).powi(noisy_cz as i32),
    })
}

/// Exact noiseless ⟨merit⟩ of the data register (no sampling).
pub fn noiseless_expected_merit(n: usize, params: QaoaParams, config: &LabsConfig) -> Result<f64> {
    let pc = build_qaoa_parity_circuit(n, params)?;
    let prog = lower_parity_circuit(&pc)?;
    let sets = BTreeMap::from([(ChannelKey::Gate(GateType::Cz), identity_channel(4))]);
    let st = mpdo::run_kraus(&prog, &sets, config.sim())?;
    let anc = pc.ancilla_positions();
    let data: Vec<usize> = (0..n + 2).filter(|i| !anc.contains(i)).collect();
    let table = mpdo::probability_table(&st, &prog.measured)?;
    let w = n + 2;
    Ok(table
        .iter()
        .enumerate()
        .map(|(z, &pz)| {
            let seq: Vec<i8> = data.iter().map(|&pos| if z >> (w - 1 - pos) & 1 == 1 { -1 } else { 1 }).collect();
            pz.max(0.0) * mf_unchecked(&seq)
        })
        .sum())
}

/// Coarse scan over γ ∈ [0, π/2) and β ∈ [0, π/2) with `points` values each,
/// ranked by exact noiseless ⟨merit⟩ (best first).
pub fn grid_search(n: usize, points: usize, config: &LabsConfig) -> Result<Vec<(QaoaParams, f64)>> {
    if points == 0 {
        return Err(Error::Domain("grid needs at least one point per axis".into()));
    }
    let step = std::f64::consts::FRAC_PI_2 / points as f64;
    let grid: Vec<QaoaParams> =
        (0..points * points).map(|k| QaoaParams { gamma: (k / points) as f64 * step, beta: (k % points) as f64 * step }).collect();
    let mut out = par::map(config.exec, &grid, |p| noiseless_expected_merit(n, *p, config).map(|m| (*p, m)))
        .into_iter()
        .collect::<Result<Vec<_>>>()?;
    out.sort_by(|a, b| b.1.total_cmp(&a.1));
    Ok(out)
}
