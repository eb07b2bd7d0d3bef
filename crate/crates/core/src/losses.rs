//! Distribution losses: negative log-likelihood, Shannon entropy floor,
//! entropic optimal transport with a Hamming ground metric, and classical
//! fidelity.
//!
//! Probabilities come from a [`ProbSource`], which is generic over the
//! backend so the same loss code runs eagerly or on a trace.

use std::collections::BTreeSet;
use std::sync::Arc;

use nalgebra::DMatrix;

use crate::circuit_io::{bitstring, index_of, CountsDistribution};
use crate::error::{Error, Result};
use crate::linalg_diff::{Backend, ComplexTensor, Eager, Forward, Primitive, C64};
use crate::mpdo::{self, MpdoState};
use crate::par::{self, Exec};

/// Probabilities below this are clamped before taking logs.
pub const PROB_FLOOR: f64 = 1e-300;
/// Registers up to this width use the full outcome space as OT support.
pub const FULL_SUPPORT_MAX_BITS: usize = 16;
pub const DEFAULT_TOP_K: usize = 1024;
/// Above this width per-outcome contractions replace the full table.
const TABLE_MAX_BITS: usize = 14;
/// Largest cost matrix Sinkhorn will hold.
const MAX_COST_ENTRIES: usize = 1 << 25;
/// Sinkhorn stops early once the marginal residual drops below this.
const SINKHORN_TOL: f64 = 1e-13;
/// Sinkhorn hands the rest of the budget to Newton once eight iterations
/// shrink the residual by less than this factor ...
const STALL_RATIO: f64 = 0.5;
/// ... but not before this many iterations.
const NEWTON_WARMUP: usize = 32;
/// Rows with less mass sit out the Newton phase; their plan entries are
/// too close to underflow for a well-scaled Hessian.
const NEWTON_MIN_MASS: f64 = 1e-200;

/// Ordered set of equal-width bitstrings.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct SupportSet {
    width: usize,
    strings: Vec<String>,
}

impl SupportSet {
    pub fn new(width: usize, strings: Vec<String>) -> Result<Self> {
        let mut seen = BTreeSet::new();
        for s in &strings {
            if s.len() != width || !s.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(Error::Shape(format!("'{s}' is not a {width}-bit string")));
            }
            if !seen.insert(s.as_str()) {
                return Err(Error::Shape(format!("'{s}' appears twice in the support")));
            }
        }
        Ok(SupportSet { width, strings })
    }

    pub fn from_indices(width: usize, idx: &[usize]) -> Result<Self> {
        Self::new(width, idx.iter().map(|&i| bitstring(i, width)).collect())
    }

    /// All 2^width outcomes in index order.
    pub fn full(width: usize) -> Result<Self> {
        if width > 24 {
            return Err(Error::Resource(format!("{width} bits is too wide to enumerate")));
        }
        Ok(SupportSet { width, strings: (0..1usize << width).map(|i| bitstring(i, width)).collect() })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn strings(&self) -> &[String] {
        &self.strings
    }

    pub fn len(&self) -> usize {
        self.strings.len()
    }

    pub fn is_empty(&self) -> bool {
        self.strings.is_empty()
    }

    pub fn indices(&self) -> Vec<usize> {
        self.strings.iter().map(|s| index_of(s)).collect()
    }
}

/// C_xy = number of differing bit positions.
pub fn hamming_cost(xs: &SupportSet, ys: &SupportSet) -> Result<DMatrix<f64>> {
    if xs.width != ys.width {
        return Err(Error::Shape(format!("bit widths differ: {} vs {}", xs.width, ys.width)));
    }
    let (a, b) = (xs.indices(), ys.indices());
    Ok(DMatrix::from_fn(a.len(), b.len(), |i, j| (a[i] ^ b[j]).count_ones() as f64))
}

/// −Σ q ln q over the empirical frequencies, in nats.
pub fn shannon_entropy(counts: &CountsDistribution) -> f64 {
    -counts.frequencies().iter().map(|&(_, q)| q * q.ln()).sum::<f64>()
}

/// (Σ_x √(p_x q_x))². Negative entries count as zero.
pub fn classical_fidelity(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::Shape(format!("distributions have {} and {} outcomes", p.len(), q.len())));
    }
    let bc: f64 = p.iter().zip(q).map(|(a, b)| (a.max(0.0) * b.max(0.0)).sqrt()).sum();
    Ok(bc * bc)
}

/// Fidelity between two count sets over their joint support.
pub fn classical_fidelity_counts(a: &CountsDistribution, b: &CountsDistribution) -> Result<f64> {
    if a.num_bits() != b.num_bits() {
        return Err(Error::Shape(format!("bit widths differ: {} vs {}", a.num_bits(), b.num_bits())));
    }
    let (na, nb) = (a.total_shots() as f64, b.total_shots() as f64);
    let bc: f64 = a
        .counts()
        .iter()
        .filter_map(|(k, &ca)| b.counts().get(k).map(|&cb| (ca as f64 / na * cb as f64 / nb).sqrt()))
        .sum();
    Ok(bc * bc)
}

/// Fidelity of a full probability table (index order) against counts.
pub fn classical_fidelity_table(p: &[f64], counts: &CountsDistribution) -> Result<f64> {
    if p.len() != 1usize << counts.num_bits() {
        return Err(Error::Shape(format!("table of {} entries for {} bits", p.len(), counts.num_bits())));
    }
    let bc: f64 = counts.frequencies().iter().map(|&(i, q)| (p[i].max(0.0) * q).sqrt()).sum();
    Ok(bc * bc)
}

/// A model's outcome probabilities under backend `B`.
pub trait ProbSource<B: Backend> {
    fn num_bits(&self) -> usize;
    /// Real vector of p(x) for the given register indices.
    fn probs(&self, b: &mut B, outcomes: &[usize]) -> Result<B::T>;
    /// Up to `k` most likely outcomes; used only to pick an OT support.
    fn top(&self, b: &B, k: usize) -> Result<Vec<usize>>;
}

/// An MPDO state read out on `measured` (register order).
pub struct MpdoSource<'a, T> {
    pub state: &'a MpdoState<T>,
    pub measured: &'a [usize],
}

impl<'a, B: Backend> ProbSource<B> for MpdoSource<'a, B::T> {
    fn num_bits(&self) -> usize {
        self.measured.len()
    }

    fn probs(&self, b: &mut B, outcomes: &[usize]) -> Result<B::T> {
        let m = self.measured.len();
        if m <= TABLE_MAX_BITS {
            let table = mpdo::probabilities(b, self.state, self.measured)?;
            if outcomes.len() == 1 << m && outcomes.iter().enumerate().all(|(i, &x)| i == x) {
                return Ok(table);
            }
            return b.gather(&table, outcomes.to_vec());
        }
        let parts = outcomes
            .iter()
            .map(|&x| {
                let bits: Vec<u8> = (0..m).map(|j| ((x >> (m - 1 - j)) & 1) as u8).collect();
                let p = mpdo::probability(b, self.state, &bits, self.measured)?;
                b.reshape(&p, &[1])
            })
            .collect::<Result<Vec<_>>>()?;
        let refs: Vec<&B::T> = parts.iter().collect();
        b.concat(&refs, 0)
    }

    fn top(&self, b: &B, k: usize) -> Result<Vec<usize>> {
        let values = MpdoState {
            sites: self.state.sites.iter().map(|s| b.value(s).clone()).collect(),
            config: self.state.config,
            center: self.state.center,
        };
        Ok(mpdo::top_outcomes(&values, self.measured, k)?.into_iter().map(|(i, _)| i).collect())
    }
}

/// A fixed probability table (index order), seen as constants.
pub struct TableSource {
    pub bits: usize,
    pub p: Vec<f64>,
}

impl TableSource {
    pub fn new(p: Vec<f64>) -> Result<Self> {
        if !p.len().is_power_of_two() {
            return Err(Error::Shape(format!("table length {} is not a power of two", p.len())));
        }
        Ok(TableSource { bits: p.len().trailing_zeros() as usize, p })
    }
}

impl<B: Backend> ProbSource<B> for TableSource {
    fn num_bits(&self) -> usize {
        self.bits
    }

    fn probs(&self, b: &mut B, outcomes: &[usize]) -> Result<B::T> {
        let v: Vec<f64> = outcomes
            .iter()
            .map(|&x| self.p.get(x).copied().ok_or_else(|| Error::Shape(format!("outcome {x} out of range"))))
            .collect::<Result<_>>()?;
        Ok(b.constant(ComplexTensor::from_real(&v, &[v.len()])?))
    }

    fn top(&self, _: &B, k: usize) -> Result<Vec<usize>> {
        let mut idx: Vec<usize> = (0..self.p.len()).collect();
        idx.sort_by(|&a, &b| self.p[b].total_cmp(&self.p[a]).then(a.cmp(&b)));
        idx.truncate(k);
        Ok(idx)
    }
}

fn check_width<B: Backend>(src: &dyn ProbSource<B>, counts: &CountsDistribution) -> Result<()> {
    if src.num_bits() != counts.num_bits() {
        return Err(Error::Shape(format!(
            "model measures {} bits but counts have {}",
            src.num_bits(),
            counts.num_bits()
        )));
    }
    Ok(())
}

/// −(1/N) Σ n_x ln p_x in nats, with p clamped at [`PROB_FLOOR`].
pub fn nll<B: Backend>(b: &mut B, src: &dyn ProbSource<B>, counts: &CountsDistribution) -> Result<B::T> {
    check_width(src, counts)?;
    let freq = counts.frequencies();
    let idx: Vec<usize> = freq.iter().map(|f| f.0).collect();
    let p = src.probs(b, &idx)?;
    let floored = b.value(&p).data().iter().filter(|z| z.re <= PROB_FLOOR).count();
    if floored > 0 {
        log::warn!("{floored} observed outcomes have probability at or below {PROB_FLOOR:e}; clamped");
    }
    let logp = b.log_real(&p, PROB_FLOOR)?;
    let w: Vec<f64> = freq.iter().map(|f| -f.1).collect();
    let w = b.constant(ComplexTensor::from_real(&w, &[w.len()])?);
    let t = b.hadamard(&logp, &w)?;
    b.sum(&t)
}

/// OT support selection.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SupportPolicy {
    /// Widths up to this use every outcome.
    pub full_max_bits: usize,
    /// Otherwise: observed outcomes plus this many most likely simulated ones.
    pub top_k: usize,
}

impl Default for SupportPolicy {
    fn default() -> Self {
        SupportPolicy { full_max_bits: FULL_SUPPORT_MAX_BITS, top_k: DEFAULT_TOP_K }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OtConfig {
    pub eps: f64,
    pub iters: usize,
    pub support: SupportPolicy,
}

impl Default for OtConfig {
    fn default() -> Self {
        OtConfig { eps: 0.1, iters: 1024, support: SupportPolicy::default() }
    }
}

/// Sinkhorn convergence report attached to an OT evaluation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SinkhornDiagnostics {
    /// ‖π·1 − μ‖₁ + ‖1ᵀπ − ν‖₁ of the returned plan.
    pub residual: f64,
    pub iterations: usize,
    pub support: usize,
}

/// W_ε(μ(θ), ν) with μ renormalized over the chosen support.
pub fn ot_loss<B: Backend>(
    b: &mut B,
    src: &dyn ProbSource<B>,
    counts: &CountsDistribution,
    cfg: &OtConfig,
) -> Result<(B::T, SinkhornDiagnostics)> {
    check_width(src, counts)?;
    let m = counts.num_bits();
    let freq = counts.frequencies();
    let rows: Vec<usize> = if m <= cfg.support.full_max_bits {
        (0..1usize << m).collect()
    } else {
        let mut set: BTreeSet<usize> = freq.iter().map(|f| f.0).collect();
        set.extend(src.top(b, cfg.support.top_k)?);
        set.into_iter().collect()
    };
    let cols: Vec<usize> = freq.iter().map(|f| f.0).collect();
    let nu: Vec<f64> = freq.iter().map(|f| f.1).collect();
    if rows.len().saturating_mul(cols.len()) > MAX_COST_ENTRIES {
        return Err(Error::Resource(format!("OT cost matrix {}x{} is too large", rows.len(), cols.len())));
    }
    let cost: Vec<f64> = rows.iter().flat_map(|&x| cols.iter().map(move |&y| (x ^ y).count_ones() as f64)).collect();

    let p = src.probs(b, &rows)?;
    let total = b.sum(&p)?;
    let mu = b.div_scalar(&p, &total)?;
    let op = SinkhornOp::new(nu, cost, cfg.eps, cfg.iters)?;
    let (w, diag) = b.apply2(Box::new(op), &[&mu])?;
    let d = b.value(&diag).data();
    let diag = SinkhornDiagnostics { residual: d[0].re, iterations: d[1].re as usize, support: rows.len() };
    if diag.residual > 1e-6 {
        log::warn!("Sinkhorn stopped after {} iterations with marginal residual {:.3e}", diag.iterations, diag.residual);
    }
    let w = b.reshape(&w, &[])?;
    Ok((w, diag))
}

/// Result of an eager Sinkhorn solve.
#[derive(Clone, Debug)]
pub struct SinkhornResult {
    /// Σ π C + ε Σ π ln π.
    pub value: f64,
    /// Transport plan, rows indexed by μ and columns by ν.
    pub plan: DMatrix<f64>,
    pub residual: f64,
    pub iterations: usize,
    pub converged: bool,
}

/// Entropic OT between μ and ν under cost C by log-domain Sinkhorn.
/// Non-convergence within `iters` is reported in the result, not as an error.
pub fn sinkhorn(mu: &[f64], nu: &[f64], cost: &DMatrix<f64>, eps: f64, iters: usize) -> Result<SinkhornResult> {
    for (name, v) in [("mu", mu), ("nu", nu)] {
        if v.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
            return Err(Error::Domain(format!("{name} has negative or non-finite entries")));
        }
        let s: f64 = v.iter().sum();
        if (s - 1.0).abs() > 1e-9 {
            return Err(Error::Domain(format!("{name} sums to {s}, not 1")));
        }
    }
    if cost.nrows() != mu.len() || cost.ncols() != nu.len() {
        return Err(Error::Shape(format!(
            "cost is {}x{} for marginals of {} and {}",
            cost.nrows(),
            cost.ncols(),
            mu.len(),
            nu.len()
        )));
    }
    let rows = mu.len();
    let cols = nu.len();
    let flat: Vec<f64> = (0..rows).flat_map(|i| (0..cols).map(move |j| cost[(i, j)])).collect();
    let op = SinkhornOp::new(nu.to_vec(), flat, eps, iters)?;
    let run = op.solve(mu, false);
    let plan = DMatrix::from_fn(rows, cols, |i, j| run.plan_entry(&op, i, j));
    Ok(SinkhornResult {
        value: run.value(&op),
        plan,
        residual: run.residual,
        iterations: run.iterations,
        converged: run.residual < 1e-6,
    })
}

/// Differentiable Sinkhorn on a trace or eagerly: input μ (real vector),
/// outputs W_ε and a diagnostic pair (residual, iterations).
pub struct SinkhornOp {
    nu: Arc<Vec<f64>>,
    /// Row-major rows×cols.
    cost: Arc<Vec<f64>>,
    log_nu: Vec<f64>,
    eps: f64,
    iters: usize,
    exec: Exec,
}

struct SinkhornRun {
    log_mu: Vec<f64>,
    f: Vec<f64>,
    g: Vec<f64>,
    /// f^t and g^t for t = 1..=T, kept for the reverse pass.
    hist_f: Vec<Vec<f64>>,
    hist_g: Vec<Vec<f64>>,
    residual: f64,
    iterations: usize,
    /// Newton steps taken after Sinkhorn stalled (counted in `iterations`).
    newton_steps: usize,
}

fn log_sum_exp(it: impl Iterator<Item = f64> + Clone) -> f64 {
    let m = it.clone().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + it.map(|v| (v - m).exp()).sum::<f64>().ln()
}

impl SinkhornOp {
    pub fn new(nu: Vec<f64>, cost: Vec<f64>, eps: f64, iters: usize) -> Result<Self> {
        if !(eps > 0.0) || !eps.is_finite() {
            return Err(Error::Domain(format!("epsilon must be positive, got {eps}")));
        }
        if iters == 0 {
            return Err(Error::Domain("Sinkhorn needs at least one iteration".into()));
        }
        if nu.is_empty() || cost.len() % nu.len() != 0 {
            return Err(Error::Shape(format!("cost of {} entries for {} columns", cost.len(), nu.len())));
        }
        let log_nu = nu.iter().map(|&v| v.max(PROB_FLOOR).ln()).collect();
        Ok(SinkhornOp { nu: Arc::new(nu), cost: Arc::new(cost), log_nu, eps, iters, exec: Exec::default_for_build() })
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    fn cols(&self) -> usize {
        self.nu.len()
    }

    fn c(&self, x: usize, y: usize) -> f64 {
        self.cost[x * self.cols() + y]
    }

    fn update_f(&self, log_mu: &[f64], g: &[f64]) -> Vec<f64> {
        let (eps, cols) = (self.eps, self.cols());
        par::map_range(self.exec, log_mu.len(), |x| {
            eps * log_mu[x] - eps * log_sum_exp((0..cols).map(|y| (g[y] - self.c(x, y)) / eps))
        })
    }

    fn update_g(&self, f: &[f64]) -> Vec<f64> {
        let eps = self.eps;
        par::map_range(self.exec, self.cols(), |y| {
            eps * self.log_nu[y] - eps * log_sum_exp((0..f.len()).map(|x| (f[x] - self.c(x, y)) / eps))
        })
    }

    fn residual(&self, log_mu: &[f64], f: &[f64], g: &[f64]) -> f64 {
        let cols = self.cols();
        let mut col = vec![0.0; cols];
        let mut res = 0.0;
        for x in 0..f.len() {
            let mut row = 0.0;
            for (y, c) in col.iter_mut().enumerate() {
                let p = ((f[x] + g[y] - self.c(x, y)) / self.eps).exp();
                row += p;
                *c += p;
            }
            res += (row - log_mu[x].exp()).abs();
        }
        res + col.iter().zip(self.nu.iter()).map(|(c, n)| (c - n).abs()).sum::<f64>()
    }

    fn solve(&self, mu: &[f64], keep: bool) -> SinkhornRun {
        let log_mu: Vec<f64> = mu.iter().map(|&v| v.max(PROB_FLOOR).ln()).collect();
        let mut g = vec![0.0; self.cols()];
        let mut f = Vec::new();
        let (mut hist_f, mut hist_g) = (Vec::new(), Vec::new());
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        let mut stalled = false;
        for t in 1..=self.iters {
            f = self.update_f(&log_mu, &g);
            g = self.update_g(&f);
            iterations = t;
            if keep {
                hist_f.push(f.clone());
                hist_g.push(g.clone());
            }
            if t % 8 == 0 || t == self.iters {
                let prev = residual;
                residual = self.residual(&log_mu, &f, &g);
                if residual < SINKHORN_TOL {
                    break;
                }
                if t >= NEWTON_WARMUP && residual > STALL_RATIO * prev {
                    stalled = true;
                    break;
                }
            }
        }
        // Unequal masses leave the dual unbounded along (1, −1).
        let balanced = (mu.iter().sum::<f64>() - self.nu.iter().sum::<f64>()).abs() < 1e-12;
        let mut run = SinkhornRun { log_mu, f, g, hist_f, hist_g, residual, iterations, newton_steps: 0 };
        if stalled && balanced && iterations < self.iters {
            self.newton(&mut run, self.iters - iterations);
        }
        run
    }

    fn plan(&self, f: &[f64], g: &[f64]) -> Vec<f64> {
        let (eps, cols) = (self.eps, self.cols());
        par::map_range(self.exec, f.len() * cols, |i| {
            let (x, y) = (i / cols, i % cols);
            ((f[x] + g[y] - self.c(x, y)) / eps).exp()
        })
    }

    /// Concave dual ⟨f, μ⟩ + ⟨g, ν⟩ − ε Σ π.
    fn dual(&self, mu: &[f64], f: &[f64], g: &[f64]) -> f64 {
        let mass: f64 = self.plan(f, g).iter().sum();
        dot(f, mu) + dot(g, &self.nu) - self.eps * mass
    }

    /// Newton ascent on the dual. The Hessian is −(1/ε)·[[diag r, π], [πᵀ, diag c]]
    /// with r, c the plan marginals; its only null direction (1, −1) is
    /// orthogonal to the gradient, so the system is consistent. Rows below
    /// [`NEWTON_MIN_MASS`] stay fixed and get one exact row update at the end.
    fn newton(&self, run: &mut SinkhornRun, budget: usize) {
        let (rows, cols, eps) = (run.f.len(), self.cols(), self.eps);
        let mu: Vec<f64> = run.log_mu.iter().map(|a| a.exp()).collect();
        let active: Vec<bool> = mu.iter().map(|&m| m > NEWTON_MIN_MASS).collect();
        let mut dual = self.dual(&mu, &run.f, &run.g);
        for _ in 0..budget {
            let plan = self.plan(&run.f, &run.g);
            let r: Vec<f64> = par::map_range(self.exec, rows, |x| plan[x * cols..(x + 1) * cols].iter().sum());
            let c: Vec<f64> = par::map_range(self.exec, cols, |y| (0..rows).map(|x| plan[x * cols + y]).sum());
            let grad: Vec<f64> = (0..rows)
                .map(|x| if active[x] { mu[x] - r[x] } else { 0.0 })
                .chain(self.nu.iter().zip(&c).map(|(n, c)| n - c))
                .collect();
            let rhs: Vec<f64> = grad.iter().map(|v| eps * v).collect();
            let step = self.hessian_solve(&plan, &r, &c, &active, &rhs);
            let slope = dot(&grad, &step);
            if !(slope > 0.0) || step.iter().any(|v| !v.is_finite()) {
                break;
            }
            let mut t = 1.0;
            let mut accepted = false;
            for _ in 0..40 {
                let f: Vec<f64> = run.f.iter().zip(&step[..rows]).map(|(a, d)| a + t * d).collect();
                let g: Vec<f64> = run.g.iter().zip(&step[rows..]).map(|(a, d)| a + t * d).collect();
                let trial = self.dual(&mu, &f, &g);
                // Near the optimum the dual gain drops below rounding, so a
                // smaller marginal residual also counts as progress.
                let better = trial >= dual + 1e-4 * t * slope
                    || (trial.is_finite() && self.residual(&run.log_mu, &f, &g) < run.residual);
                if better {
                    (run.f, run.g, dual) = (f, g, trial);
                    accepted = true;
                    break;
                }
                t *= 0.5;
            }
            if !accepted {
                break;
            }
            run.newton_steps += 1;
            run.iterations += 1;
            if active.iter().any(|a| !a) {
                let fresh = self.update_f(&run.log_mu, &run.g);
                for x in (0..rows).filter(|&x| !active[x]) {
                    run.f[x] = fresh[x];
                }
            }
            run.residual = self.residual(&run.log_mu, &run.f, &run.g);
            if run.residual < SINKHORN_TOL {
                break;
            }
        }
    }

    /// Jacobi-preconditioned conjugate gradients on [[diag r, π], [πᵀ, diag c]] x = b,
    /// with inactive rows pinned to zero.
    fn hessian_solve(&self, plan: &[f64], r: &[f64], c: &[f64], active: &[bool], b: &[f64]) -> Vec<f64> {
        let (rows, cols) = (r.len(), c.len());
        let n = rows + cols;
        let apply = |v: &[f64]| -> Vec<f64> {
            let (vf, vg) = v.split_at(rows);
            let top: Vec<f64> = par::map_range(self.exec, rows, |x| {
                if active[x] {
                    r[x] * vf[x] + dot(&plan[x * cols..(x + 1) * cols], vg)
                } else {
                    vf[x]
                }
            });
            let bottom: Vec<f64> = par::map_range(self.exec, cols, |y| {
                c[y] * vg[y] + (0..rows).filter(|&x| active[x]).map(|x| plan[x * cols + y] * vf[x]).sum::<f64>()
            });
            top.into_iter().chain(bottom).collect()
        };
        let diag: Vec<f64> = (0..rows).map(|x| if active[x] { r[x] } else { 1.0 }).chain(c.iter().copied()).map(|d| d.max(PROB_FLOOR)).collect();
        let b_norm = dot(b, b).sqrt();
        let mut x = vec![0.0; n];
        let mut res = b.to_vec();
        let mut z: Vec<f64> = res.iter().zip(&diag).map(|(a, d)| a / d).collect();
        let mut p = z.clone();
        let mut rz = dot(&res, &z);
        for _ in 0..(2 * n + 20).min(4000) {
            let q = apply(&p);
            let pq = dot(&p, &q);
            if !(pq > 0.0) {
                break;
            }
            let alpha = rz / pq;
            for i in 0..n {
                x[i] += alpha * p[i];
                res[i] -= alpha * q[i];
            }
            if dot(&res, &res).sqrt() <= 1e-14 * b_norm {
                break;
            }
            z = res.iter().zip(&diag).map(|(a, d)| a / d).collect();
            let rz_new = dot(&res, &z);
            let beta = rz_new / rz;
            rz = rz_new;
            for i in 0..n {
                p[i] = z[i] + beta * p[i];
            }
        }
        x
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl SinkhornRun {
    fn plan_entry(&self, op: &SinkhornOp, x: usize, y: usize) -> f64 {
        ((self.f[x] + self.g[y] - op.c(x, y)) / op.eps).exp()
    }

    /// Σ π (C + ε ln π) = Σ π (f_x + g_y).
    fn value(&self, op: &SinkhornOp) -> f64 {
        let mut w = 0.0;
        for x in 0..self.f.len() {
            for y in 0..op.cols() {
                w += self.plan_entry(op, x, y) * (self.f[x] + self.g[y]);
            }
        }
        w
    }
}

impl Primitive for SinkhornOp {
    fn name(&self) -> &'static str {
        "sinkhorn"
    }

    fn forward(&self, x: &[&ComplexTensor]) -> Result<Forward> {
        let mu: Vec<f64> = x[0].data().iter().map(|z| z.re).collect();
        if mu.len() * self.cols() != self.cost.len() {
            return Err(Error::Shape(format!("mu has {} entries; cost expects {}", mu.len(), self.cost.len() / self.cols())));
        }
        let run = self.solve(&mu, true);
        let w = ComplexTensor::from_real(&[run.value(self)], &[1])?;
        let diag = ComplexTensor::from_real(&[run.residual, run.iterations as f64], &[2])?;
        Ok(Forward { outputs: vec![w, diag], saved: Some(Box::new(run)) })
    }

    /// Reverse pass: the envelope gradient after a Newton phase, otherwise
    /// through the unrolled Sinkhorn iterations. With a = ln μ,
    /// f^t = ε a − ε LSE_y((g^{t−1} − C)/ε) and g^t = ε b − ε LSE_x((f^t − C)/ε);
    /// the softmax weights are recovered from the stored potentials.
    fn backward(&self, x: &[&ComplexTensor], fwd: &Forward, g: &[Option<&ComplexTensor>]) -> Result<Vec<Option<ComplexTensor>>> {
        let Some(gw) = g[0] else { return Ok(vec![None]) };
        let gw = gw.data()[0].re;
        let run = fwd.saved.as_ref().and_then(|s| s.downcast_ref::<SinkhornRun>()).expect("sinkhorn state");
        if run.newton_steps > 0 {
            // The Newton phase ends at the dual optimum, where ∂W/∂μ = f up
            // to a constant that the renormalization of μ removes.
            let data = x[0]
                .data()
                .iter()
                .zip(&run.f)
                .map(|(mu, f)| C64::new(if mu.re > PROB_FLOOR { gw * f } else { 0.0 }, 0.0))
                .collect();
            return Ok(vec![Some(ComplexTensor::new(data, x[0].shape().to_vec())?)]);
        }
        let (eps, rows, cols) = (self.eps, run.f.len(), self.cols());
        let la = &run.log_mu;
        let lb = &self.log_nu;

        // ∂W/∂f_x = Σ_y π (1 + (f_x + g_y)/ε), likewise for g.
        let (f, gg) = (&run.f, &run.g);
        let mut fbar: Vec<f64> = par::map_range(self.exec, rows, |x| {
            (0..cols).map(|y| run.plan_entry(self, x, y) * (1.0 + (f[x] + gg[y]) / eps)).sum::<f64>() * gw
        });
        let mut gbar: Vec<f64> = par::map_range(self.exec, cols, |y| {
            (0..rows).map(|x| run.plan_entry(self, x, y) * (1.0 + (f[x] + gg[y]) / eps)).sum::<f64>() * gw
        });
        let mut abar = vec![0.0; rows];
        for t in (0..run.iterations).rev() {
            let (ft, gt) = (&run.hist_f[t], &run.hist_g[t]);
            // g^t depends on f^t through a softmax over x.
            let add: Vec<f64> = par::map_range(self.exec, rows, |x| {
                -(0..cols).map(|y| gbar[y] * ((ft[x] + gt[y] - self.c(x, y)) / eps - lb[y]).exp()).sum::<f64>()
            });
            for (fb, a) in fbar.iter_mut().zip(add) {
                *fb += a;
            }
            for (ab, fb) in abar.iter_mut().zip(&fbar) {
                *ab += eps * fb;
            }
            if t == 0 {
                break;
            }
            let gprev = &run.hist_g[t - 1];
            gbar = par::map_range(self.exec, cols, |y| {
                -(0..rows).map(|x| fbar[x] * ((ft[x] + gprev[y] - self.c(x, y)) / eps - la[x]).exp()).sum::<f64>()
            });
            fbar.iter_mut().for_each(|v| *v = 0.0);
        }
        let data = x[0]
            .data()
            .iter()
            .zip(&abar)
            .map(|(mu, ab)| if mu.re > PROB_FLOOR { C64::new(ab / mu.re, 0.0) } else { C64::new(0.0, 0.0) })
            .collect();
        Ok(vec![Some(ComplexTensor::new(data, x[0].shape().to_vec())?)])
    }
}

/// Eager NLL of a probability table against counts.
pub fn nll_table(p: &[f64], counts: &CountsDistribution) -> Result<f64> {
    let src = TableSource::new(p.to_vec())?;
    let mut e = Eager::new();
    let v = nll(&mut e, &src, counts)?;
    Ok(e.value(&v).scalar_value().re)
}
