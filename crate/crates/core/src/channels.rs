//! CPTP channels: the Stinespring parameterization, reference channels, Choi
//! matrices and channel distances.
//!
//! Conventions fixed here because they leak into files and golden values:
//! vec() stacks columns, so vec(K)[i + d·j] = K[i][j]; two-qubit Paulis are
//! ordered lexicographically over {I,X,Y,Z}⊗{I,X,Y,Z} with I⊗I skipped.

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::linalg_diff::{decomp, Backend, ComplexTensor, Eager, Op, C64, I, ONE, ZERO};

/// Completeness tolerance used when validating Kraus sets.
pub const CPTP_TOL: f64 = 1e-10;

/// Default Kraus count for every channel.
pub const DEFAULT_N_KRAUS: usize = 4;

#[derive(Clone, Debug)]
pub struct KrausSet {
    ops: Vec<ComplexTensor>,
    d: usize,
}

impl KrausSet {
    /// Validates shapes and the completeness relation.
    pub fn new(ops: Vec<ComplexTensor>) -> Result<Self> {
        let k = Self::unchecked(ops)?;
        let defect = k.completeness_defect();
        if defect > CPTP_TOL {
            return Err(Error::Domain(format!("Kraus set is not trace preserving (defect {defect:e})")));
        }
        Ok(k)
    }

    /// Shape checks only; for intermediate or deliberately non-TP sets.
    pub fn unchecked(ops: Vec<ComplexTensor>) -> Result<Self> {
        let d = ops.first().map(|k| k.rows()).ok_or_else(|| Error::Domain("empty Kraus set".into()))?;
        if ops.iter().any(|k| k.shape() != [d, d]) {
            return Err(Error::Shape("Kraus operators must share one square shape".into()));
        }
        Ok(KrausSet { ops, d })
    }

    pub fn ops(&self) -> &[ComplexTensor] {
        &self.ops
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn len(&self) -> usize {
        self.ops.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ops.is_empty()
    }

    /// max |Σ K†K − I|.
    pub fn completeness_defect(&self) -> f64 {
        let mut acc = ComplexTensor::zeros(&[self.d, self.d]);
        for k in &self.ops {
            acc.add_assign(&ComplexTensor::gemm(k, Op::H, k, Op::N).expect("square")).expect("square");
        }
        acc.max_abs_diff(&ComplexTensor::identity(self.d))
    }

    /// Stacks the operators into an (N, d, d) tensor.
    pub fn to_tensor(&self) -> ComplexTensor {
        let data = self.ops.iter().flat_map(|k| k.data().iter().copied()).collect();
        ComplexTensor::new(data, vec![self.ops.len(), self.d, self.d]).expect("consistent shape")
    }

    pub fn from_tensor(t: &ComplexTensor) -> Result<Self> {
        let s = t.shape();
        if s.len() != 3 || s[1] != s[2] {
            return Err(Error::Shape(format!("Kraus tensor must be (N, d, d), got {s:?}")));
        }
        let dd = s[1] * s[2];
        let ops = (0..s[0])
            .map(|k| ComplexTensor::new(t.data()[k * dd..(k + 1) * dd].to_vec(), vec![s[1], s[2]]))
            .collect::<Result<Vec<_>>>()?;
        Self::unchecked(ops)
    }

    /// Applies ρ → Σ K ρ K†.
    pub fn apply(&self, rho: &ComplexTensor) -> Result<ComplexTensor> {
        let mut out = ComplexTensor::zeros(rho.shape());
        for k in &self.ops {
            out.add_assign(&ComplexTensor::gemm(&k.matmul(rho)?, Op::N, k, Op::H)?)?;
        }
        Ok(out)
    }

    /// Mixes the Kraus index with an isometry W (N'×N, W†W = I): K'_j = Σ_k W_jk K_k.
    /// The channel is unchanged.
    pub fn remix(&self, w: &ComplexTensor) -> Result<Self> {
        if w.ndim() != 2 || w.cols() != self.ops.len() {
            return Err(Error::Shape("mixing isometry has the wrong width".into()));
        }
        let ops = (0..w.rows())
            .map(|j| {
                let mut acc = ComplexTensor::zeros(&[self.d, self.d]);
                for (k, op) in self.ops.iter().enumerate() {
                    acc.add_assign(&op.scale(w.at2(j, k)))?;
                }
                Ok(acc)
            })
            .collect::<Result<Vec<_>>>()?;
        Self::unchecked(ops)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ChannelParams {
    theta: Vec<f64>,
    d: usize,
    n_kraus: usize,
}

impl ChannelParams {
    pub fn new(theta: Vec<f64>, d: usize, n_kraus: usize) -> Result<Self> {
        let expected = (d * n_kraus).pow(2);
        if d == 0 || n_kraus == 0 || theta.len() != expected {
            return Err(Error::ParamShape { expected, got: theta.len() });
        }
        Ok(ChannelParams { theta, d, n_kraus })
    }

    pub fn zeros(d: usize, n_kraus: usize) -> Self {
        ChannelParams { theta: vec![0.0; (d * n_kraus).pow(2)], d, n_kraus }
    }

    /// θ entries i.i.d. N(0, σ²).
    pub fn random(d: usize, n_kraus: usize, sigma: f64, rng: &mut impl Rng) -> Result<Self> {
        let normal = Normal::new(0.0, sigma).map_err(|e| Error::Domain(format!("sigma: {e}")))?;
        let theta = (0..(d * n_kraus).pow(2)).map(|_| normal.sample(rng)).collect();
        Ok(ChannelParams { theta, d, n_kraus })
    }

    pub fn theta(&self) -> &[f64] {
        &self.theta
    }

    pub fn theta_mut(&mut self) -> &mut [f64] {
        &mut self.theta
    }

    pub fn d(&self) -> usize {
        self.d
    }

    pub fn n_kraus(&self) -> usize {
        self.n_kraus
    }
}

/// K_k = rows [k·d, (k+1)·d) of the first d columns of e^{iH(θ)}.
pub fn kraus_from_params(p: &ChannelParams) -> Result<KrausSet> {
    let mut e = Eager::new();
    let theta = ComplexTensor::from_real(&p.theta, &[p.theta.len()])?;
    let t = kraus_tensor(&mut e, &theta, p.d, p.n_kraus)?;
    KrausSet::from_tensor(&t)
}

/// Backend-generic Kraus construction; returns an (N, d, d) tensor.
pub fn kraus_tensor<B: Backend>(b: &mut B, theta: &B::T, d: usize, n_kraus: usize) -> Result<B::T> {
    let dn = d * n_kraus;
    let len = b.shape(theta).iter().product::<usize>();
    if len != dn * dn {
        return Err(Error::ParamShape { expected: dn * dn, got: len });
    }
    let h = b.hermitian_from_params(theta, dn)?;
    let u = b.matrix_exp(&h)?;
    let iso = b.slice(&u, 1, 0, d)?;
    b.reshape(&iso, &[n_kraus, d, d])
}

/// Recovers Stinespring parameters for a Kraus set: the Kraus isometry is
/// completed to a unitary U and θ is read off H = −i log U (principal branch).
/// Sets shorter than `n_kraus` are zero padded.
pub fn params_from_kraus(k: &KrausSet, n_kraus: usize) -> Result<ChannelParams> {
    let d = k.d();
    if k.len() > n_kraus {
        return Err(Error::Domain(format!("{} Kraus operators exceed the budget of {n_kraus}", k.len())));
    }
    let dn = d * n_kraus;
    let mut cols: Vec<Vec<C64>> = (0..d)
        .map(|j| {
            let mut c = vec![ZERO; dn];
            for (kk, op) in k.ops().iter().enumerate() {
                for i in 0..d {
                    c[kk * d + i] = op.at2(i, j);
                }
            }
            c
        })
        .collect();
    complete_columns(&mut cols, dn);
    let u = ComplexTensor::from_fn2(dn, dn, |i, j| cols[j][i]);
    let h = unitary_log(&u)?;
    let mut theta = Vec::with_capacity(dn * dn);
    theta.extend((0..dn).map(|i| h.at2(i, i).re));
    for (i, j) in crate::linalg_diff::ops::upper_pairs(dn) {
        theta.push(h.at2(i, j).re);
        theta.push(h.at2(i, j).im);
    }
    ChannelParams::new(theta, d, n_kraus)
}

/// Extends orthonormal columns to a full basis by Gram-Schmidt over unit vectors.
fn complete_columns(cols: &mut Vec<Vec<C64>>, n: usize) {
    for e in 0..n {
        if cols.len() == n {
            break;
        }
        let mut x = vec![ZERO; n];
        x[e] = ONE;
        for _ in 0..2 {
            for c in cols.iter() {
                let proj: C64 = c.iter().zip(&x).map(|(a, b)| a.conj() * b).sum();
                for (xi, ci) in x.iter_mut().zip(c) {
                    *xi -= proj * ci;
                }
            }
        }
        let nrm = x.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        if nrm > 1e-6 {
            cols.push(x.iter().map(|z| z / nrm).collect());
        }
    }
}

/// Hermitian H with e^{iH} = U for unitary U. Diagonalizes through a Hermitian
/// combination Re U + c·Im U, which shares U's eigenvectors unless two phases
/// collide under that c; the result is verified and other c values tried.
fn unitary_log(u: &ComplexTensor) -> Result<ComplexTensor> {
    let n = u.rows();
    let ud = u.adjoint()?;
    let re = u.add(&ud)?.scale(C64::new(0.5, 0.0));
    let im = u.sub(&ud)?.scale(C64::new(0.0, -0.5));
    for c in [0.517, -1.913, 0.0741, 3.37] {
        let mix = re.add(&im.scale(C64::new(c, 0.0)))?;
        let (_, q) = decomp::eigh(&mix)?;
        let uq = u.matmul(&q)?;
        let phases: Vec<C64> = (0..n)
            .map(|j| (0..n).map(|i| q.at2(i, j).conj() * uq.at2(i, j)).sum::<C64>())
            .collect();
        let qp = ComplexTensor::from_fn2(n, n, |i, j| q.at2(i, j) * phases[j]);
        if qp.max_abs_diff(&uq) > 1e-10 {
            continue;
        }
        let qd = ComplexTensor::from_fn2(n, n, |i, j| q.at2(i, j) * phases[j].arg());
        let h = ComplexTensor::gemm(&qd, Op::N, &q, Op::H)?;
        return h.add(&h.adjoint()?).map(|x| x.scale(C64::new(0.5, 0.0)));
    }
    Err(Error::Numeric("could not diagonalize the dilation unitary".into()))
}

pub fn identity_channel(d: usize) -> KrausSet {
    KrausSet { ops: vec![ComplexTensor::identity(d)], d }
}

/// Single-qubit Paulis I, X, Y, Z.
pub fn paulis() -> [ComplexTensor; 4] {
    let m = |a: [C64; 4]| ComplexTensor::new(a.to_vec(), vec![2, 2]).expect("2x2");
    [
        m([ONE, ZERO, ZERO, ONE]),
        m([ZERO, ONE, ONE, ZERO]),
        m([ZERO, -I, I, ZERO]),
        m([ONE, ZERO, ZERO, -ONE]),
    ]
}

fn check_probability(p: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    Ok(())
}

/// K₀ = √(1−p) I, K₁ = √p X.
pub fn bit_flip_channel(p: f64) -> Result<KrausSet> {
    check_probability(p)?;
    let [id, x, _, _] = paulis();
    Ok(KrausSet { ops: vec![id.scale(C64::new((1.0 - p).sqrt(), 0.0)), x.scale(C64::new(p.sqrt(), 0.0))], d: 2 })
}

/// K₀ = √(1−p) I₄ and √(p/15) P for the 15 non-identity two-qubit Paulis.
pub fn depolarizing_2q_channel(p: f64) -> Result<KrausSet> {
    check_probability(p)?;
    let ps = paulis();
    let mut ops = vec![ComplexTensor::identity(4).scale(C64::new((1.0 - p).sqrt(), 0.0))];
    let w = C64::new((p / 15.0).sqrt(), 0.0);
    for a in 0..4 {
        for b in 0..4 {
            if a == 0 && b == 0 {
                continue;
            }
            ops.push(ps[a].kron(&ps[b])?.scale(w));
        }
    }
    Ok(KrausSet { ops, d: 4 })
}

#[derive(Clone, Debug)]
pub struct ChoiState {
    pub matrix: ComplexTensor,
    pub normalized: bool,
}

/// J = Σ vec(K) vec(K)†, divided by Tr J when `normalize`.
pub fn choi(k: &KrausSet, normalize: bool) -> ChoiState {
    let d = k.d();
    let d2 = d * d;
    let mut j = ComplexTensor::zeros(&[d2, d2]);
    for op in k.ops() {
        let v: Vec<C64> = (0..d2).map(|idx| op.at2(idx % d, idx / d)).collect();
        for (a, va) in v.iter().enumerate() {
            for (b, vb) in v.iter().enumerate() {
                let z = j.at2(a, b) + va * vb.conj();
                j.set2(a, b, z);
            }
        }
    }
    if normalize {
        let tr = j.trace().re;
        if tr > 0.0 {
            j = j.scale(C64::new(1.0 / tr, 0.0));
        }
    }
    ChoiState { matrix: j, normalized: normalize }
}

/// Tolerance on negative eigenvalues before a Choi state counts as non-PSD.
pub const PSD_TOL: f64 = 1e-10;

fn psd_sqrt(m: &ComplexTensor) -> Result<ComplexTensor> {
    let (vals, q) = decomp::eigh(m)?;
    if let Some(&lo) = vals.first() {
        if lo < -PSD_TOL {
            return Err(Error::Domain(format!("matrix is not positive semidefinite (eigenvalue {lo:e})")));
        }
    }
    let floor = roundoff_floor(&vals);
    let roots: Vec<f64> = vals.iter().map(|&l| if l > floor { l.sqrt() } else { 0.0 }).collect();
    let qs = ComplexTensor::from_fn2(q.rows(), q.cols(), |i, j| q.at2(i, j) * roots[j]);
    ComplexTensor::gemm(&qs, Op::N, &q, Op::H)
}

// Eigenvalues below this are roundoff; their square roots would be O(√eps).
fn roundoff_floor(vals: &[f64]) -> f64 {
    let top = vals.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    16.0 * f64::EPSILON * vals.len() as f64 * top
}

fn check_pair(a: &ChoiState, b: &ChoiState) -> Result<()> {
    if !a.normalized || !b.normalized {
        return Err(Error::Domain("channel metrics need normalized Choi states".into()));
    }
    if a.matrix.shape() != b.matrix.shape() {
        return Err(Error::Shape("Choi states of different dimension".into()));
    }
    Ok(())
}

/// Uhlmann fidelity (Tr √(√ρ σ √ρ))², clamped to [0, 1].
pub fn process_fidelity(rho: &ChoiState, sigma: &ChoiState) -> Result<f64> {
    check_pair(rho, sigma)?;
    let s = psd_sqrt(&rho.matrix)?;
    psd_sqrt(&sigma.matrix)?;
    let inner = s.matmul(&sigma.matrix)?.matmul(&s)?;
    let inner = inner.add(&inner.adjoint()?)?.scale(C64::new(0.5, 0.0));
    let (vals, _) = decomp::eigh(&inner)?;
    let floor = roundoff_floor(&vals);
    let t: f64 = vals.iter().filter(|&&l| l > floor).map(|&l| l.sqrt()).sum();
    Ok((t * t).clamp(0.0, 1.0))
}

/// ½‖ρ − σ‖₁.
pub fn trace_distance(rho: &ChoiState, sigma: &ChoiState) -> Result<f64> {
    check_pair(rho, sigma)?;
    let diff = rho.matrix.sub(&sigma.matrix)?;
    let diff = diff.add(&diff.adjoint()?)?.scale(C64::new(0.5, 0.0));
    let (vals, _) = decomp::eigh(&diff)?;
    Ok((0.5 * vals.iter().map(|l| l.abs()).sum::<f64>()).clamp(0.0, 1.0))
}

/// (1/d²) Σ |Tr K|².
pub fn entanglement_fidelity_vs_identity(k: &KrausSet) -> f64 {
    let d = k.d() as f64;
    k.ops().iter().map(|op| op.trace().norm_sqr()).sum::<f64>() / (d * d)
}

/// (d·F + 1)/(d + 1).
pub fn average_gate_fidelity(k: &KrausSet) -> f64 {
    let d = k.d() as f64;
    (d * entanglement_fidelity_vs_identity(k) + 1.0) / (d + 1.0)
}
