//! Gradient-based fitting of a [`NoiseModel`] to measured counts: AdamW,
//! the training loop with best-model tracking, checkpoints, and evaluation.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::channels::ChannelParams;
use crate::circuit_io::CountsDistribution;
use crate::error::{Error, Result};
use crate::linalg_diff::{gradient, Backend, ComplexTensor, Eager};
use crate::losses::{self, MpdoSource, OtConfig, ProbSource};
use crate::mpdo::{self, SimConfig};
use crate::noise_model::{infidelity_report, ChannelKey, InfidelityRow, NoiseModel, NoisyProgram};

const CHECKPOINT_VERSION: u32 = 1;
/// Early stop: NLL within this of the entropy floor ...
const EARLY_STOP_GAP: f64 = 1e-3;
/// ... for this many consecutive iterations.
const EARLY_STOP_PATIENCE: usize = 100;
const FD_GATE_PARAMS: usize = 8;
const FD_GATE_STEP: f64 = 1e-5;
const FD_GATE_TOL: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LossKind {
    Nll,
    Ot { eps: f64, iters: usize, full_max_bits: usize, top_k: usize },
}

impl LossKind {
    /// OT with ε = 0.1, 1024 iterations and the default support policy.
    pub fn ot_default() -> Self {
        Self::ot(&OtConfig::default())
    }

    pub fn ot(c: &OtConfig) -> Self {
        LossKind::Ot { eps: c.eps, iters: c.iters, full_max_bits: c.support.full_max_bits, top_k: c.support.top_k }
    }

    fn ot_config(&self) -> Option<OtConfig> {
        match *self {
            LossKind::Nll => None,
            LossKind::Ot { eps, iters, full_max_bits, top_k } => Some(OtConfig {
                eps,
                iters,
                support: losses::SupportPolicy { full_max_bits, top_k },
            }),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_adam: f64,
    pub max_iters: usize,
    pub chi: usize,
    pub kappa: usize,
    pub seed: u64,
    /// Write a checkpoint every this many iterations; 0 disables.
    pub checkpoint_every: usize,
    /// Log progress every this many iterations; 0 disables.
    pub log_every: usize,
    /// Stop once the NLL stays near the entropy floor (NLL only).
    pub early_stop: bool,
    /// Compare autodiff with finite differences before iterating.
    pub gradient_check: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            loss: LossKind::Nll,
            learning_rate: 1e-3,
            weight_decay: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps_adam: 1e-8,
            max_iters: 2000,
            chi: 8,
            kappa: 16,
            seed: 0,
            checkpoint_every: 0,
            log_every: 0,
            early_stop: true,
            gradient_check: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return bad(format!("learning rate must be positive, got {}", self.learning_rate));
        }
        if !(self.weight_decay >= 0.0) || !self.weight_decay.is_finite() {
            return bad(format!("weight decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad(format!("betas must lie in [0, 1), got {} and {}", self.beta1, self.beta2));
        }
        if !(self.eps_adam > 0.0) {
            return bad(format!("eps_adam must be positive, got {}", self.eps_adam));
        }
        if self.max_iters == 0 {
            return bad("max_iters must be at least 1".into());
        }
        if let LossKind::Ot { eps, iters, .. } = self.loss {
            if !(eps > 0.0) || iters == 0 {
                return bad(format!("OT needs eps > 0 and iters >= 1, got {eps} and {iters}"));
            }
        }
        self.sim().validate()
    }

    pub fn sim(&self) -> SimConfig {
        SimConfig::new(self.chi).with_kappa(self.kappa)
    }

    /// Hash of every setting that shapes the trajectory. Budget, logging and
    /// stopping settings are excluded so a run can be extended on resume.
    pub fn trajectory_hash(&self) -> String {
        let key = serde_json::json!({
            "loss": self.loss,
            "learning_rate": self.learning_rate,
            "weight_decay": self.weight_decay,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps_adam": self.eps_adam,
            "chi": self.chi,
            "kappa": self.kappa,
            "seed": self.seed,
        });
        sha256_hex(key.to_string().as_bytes())
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// AdamW moments for a flat parameter vector.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(n: usize) -> Self {
        OptimizerState { m: vec![0.0; n], v: vec![0.0; n], step: 0 }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamW {
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamW {
    pub fn from_config(c: &TrainConfig) -> Self {
        AdamW { lr: c.learning_rate, weight_decay: c.weight_decay, beta1: c.beta1, beta2: c.beta2, eps: c.eps_adam }
    }
}

/// One decoupled-weight-decay Adam update in place. A non-finite gradient
/// aborts before anything changes and reports its index.
pub fn adamw_step(params: &mut [f64], grads: &[f64], state: &mut OptimizerState, hp: &AdamW) -> Result<()> {
    if params.len() != grads.len() || state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::ParamShape { expected: params.len(), got: grads.len() });
    }
    if let Some(i) = grads.iter().position(|g| !g.is_finite()) {
        return Err(Error::Numeric(format!("non-finite gradient at parameter {i}")));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - hp.beta1.powi(t);
    let c2 = 1.0 - hp.beta2.powi(t);
    for i in 0..params.len() {
        let g = grads[i];
        state.m[i] = hp.beta1 * state.m[i] + (1.0 - hp.beta1) * g;
        state.v[i] = hp.beta2 * state.v[i] + (1.0 - hp.beta2) * g * g;
        let mhat = state.m[i] / c1;
        let vhat = state.v[i] / c2;
        params[i] -= hp.lr * (mhat / (vhat.sqrt() + hp.eps) + hp.weight_decay * params[i]);
    }
    Ok(())
}

/// Key and position within that channel for a flat parameter index.
pub fn locate_param(model: &NoiseModel, idx: usize) -> Option<(ChannelKey, usize)> {
    let mut off = 0;
    for (k, p) in model.channels() {
        let n = p.theta().len();
        if idx < off + n {
            return Some((*k, idx - off));
        }
        off += n;
    }
    None
}

fn loss_on<B: Backend>(
    b: &mut B,
    program: &NoisyProgram,
    counts: &CountsDistribution,
    n_kraus: usize,
    theta: &BTreeMap<ChannelKey, B::T>,
    config: &TrainConfig,
) -> Result<B::T> {
    let kraus = mpdo::kraus_tensors(b, program, n_kraus, theta)?;
    let st = mpdo::run(b, program, &kraus, config.sim())?;
    let src = MpdoSource { state: &st, measured: &program.measured };
    let src: &dyn ProbSource<B> = &src;
    match config.loss.ot_config() {
        None => losses::nll(b, src, counts),
        Some(ot) => Ok(losses::ot_loss(b, src, counts, &ot)?.0),
    }
}

/// Loss value without gradients.
pub fn loss_value(program: &NoisyProgram, counts: &CountsDistribution, model: &NoiseModel, config: &TrainConfig) -> Result<f64> {
    let mut e = Eager::new();
    let theta = program
        .channel_keys()
        .into_iter()
        .map(|k| {
            let p = model.get(k).ok_or_else(|| Error::Coverage(k.to_string()))?;
            Ok((k, e.constant(ComplexTensor::from_real(p.theta(), &[p.theta().len()])?)))
        })
        .collect::<Result<BTreeMap<_, _>>>()?;
    let l = loss_on(&mut e, program, counts, model.n_kraus(), &theta, config)?;
    let v = l.scalar_value().re;
    if !v.is_finite() {
        return Err(Error::Numeric(format!("loss is {v}")));
    }
    Ok(v)
}

/// Loss and its gradient with respect to the model's flat parameters.
/// Channels the program never uses get zero gradient.
pub fn loss_and_grad(
    program: &NoisyProgram,
    counts: &CountsDistribution,
    model: &NoiseModel,
    config: &TrainConfig,
) -> Result<(f64, Vec<f64>)> {
    let used = program.channel_keys();
    let params = used
        .iter()
        .map(|k| model.get(*k).map(|p| p.theta().to_vec()).ok_or_else(|| Error::Coverage(k.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let (value, grads) = gradient(&params, |tr, vars| {
        let theta = used.iter().copied().zip(vars.iter().copied()).collect();
        loss_on(tr, program, counts, model.n_kraus(), &theta, config)
    })?;
    let by_key: BTreeMap<ChannelKey, Vec<f64>> = used.into_iter().zip(grads).collect();
    let flat = model
        .channels()
        .iter()
        .flat_map(|(k, p)| by_key.get(k).cloned().unwrap_or_else(|| vec![0.0; p.theta().len()]))
        .collect();
    Ok((value, flat))
}

/// Central finite differences against autodiff on randomly chosen
/// parameters of the channels the program uses. Returns the relative
/// error ‖fd − ad‖ / max(‖fd‖, ‖ad‖, 1e-8).
pub fn gradient_check(
    program: &NoisyProgram,
    counts: &CountsDistribution,
    model: &NoiseModel,
    config: &TrainConfig,
    n_params: usize,
    h: f64,
) -> Result<f64> {
    let (_, grad) = loss_and_grad(program, counts, model, config)?;
    let used = program.channel_keys();
    let candidates: Vec<usize> = (0..model.num_params())
        .filter(|&i| locate_param(model, i).is_some_and(|(k, _)| used.contains(&k)))
        .collect();
    if candidates.is_empty() {
        return Ok(0.0);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x6772_6164);
    let picks: Vec<usize> = (0..n_params).map(|_| candidates[rng.random_range(0..candidates.len())]).collect();
    let base = model.flat_params();
    let mut probe = model.clone();
    let (mut num, mut den_fd, mut den_ad) = (0.0, 0.0, 0.0);
    for &i in &picks {
        let mut eval = |delta: f64| -> Result<f64> {
            let mut p = base.clone();
            p[i] += delta;
            probe.set_flat_params(&p)?;
            loss_value(program, counts, &probe, config)
        };
        let fd = (eval(h)? - eval(-h)?) / (2.0 * h);
        num += (fd - grad[i]).powi(2);
        den_fd += fd * fd;
        den_ad += grad[i] * grad[i];
    }
    Ok(num.sqrt() / den_fd.sqrt().max(den_ad.sqrt()).max(1e-8))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct IterRecord {
    pub iter: usize,
    pub loss: f64,
    pub grad_norm: f64,
    /// Wall-clock seconds since the run (or resumed run) started.
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<IterRecord>,
}

impl TrainHistory {
    pub fn losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.loss).collect()
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("iter,loss,grad_norm,seconds\n");
        for r in &self.records {
            s.push_str(&format!("{},{:.16e},{:.16e},{:.3}\n", r.iter, r.loss, r.grad_norm, r.seconds));
        }
        s
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum StopReason {
    Budget,
    /// NLL stayed within the early-stop gap of the entropy floor.
    Converged,
    /// Loss or gradient became non-finite; the best finite model is returned.
    Diverged(String),
}

#[derive(Clone, Debug)]
pub struct TrainResult {
    /// Lowest-loss model seen.
    pub model: NoiseModel,
    pub best_loss: f64,
    /// Parameters after the last update.
    pub last_model: NoiseModel,
    pub history: TrainHistory,
    pub stop: StopReason,
    pub entropy_floor: f64,
    /// Relative error of the finite-difference gate, when it ran.
    pub gradient_check: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct Checkpoint {
    version: u32,
    config_hash: String,
    data_hash: String,
    /// Iterations completed.
    iteration: usize,
    layout: Vec<String>,
    params: Vec<f64>,
    best_params: Vec<f64>,
    best_loss: f64,
    optimizer: OptimizerState,
    near_floor: usize,
    history: TrainHistory,
}

fn layout(model: &NoiseModel) -> Vec<String> {
    model.channels().iter().map(|(k, p)| format!("{k}:{}:{}", p.d(), p.n_kraus())).collect()
}

/// Fingerprint of the program, counts and model layout.
fn data_hash(program: &NoisyProgram, counts: &CountsDistribution, model: &NoiseModel) -> String {
    let text = format!("{:?}|{:?}|{}|{}", program.steps, program.measured, counts.to_json(), layout(model).join(","));
    sha256_hex(text.as_bytes())
}

struct LoopState {
    iteration: usize,
    params: Vec<f64>,
    best_params: Vec<f64>,
    best_loss: f64,
    opt: OptimizerState,
    near_floor: usize,
    history: TrainHistory,
}

/// Fits `model0` to `counts` on the lowered program.
pub fn train(
    program: &NoisyProgram,
    counts: &CountsDistribution,
    model0: &NoiseModel,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainResult> {
    config.validate()?;
    check_inputs(program, counts, model0)?;
    let params = model0.flat_params();
    let state = LoopState {
        iteration: 0,
        best_params: params.clone(),
        best_loss: f64::INFINITY,
        opt: OptimizerState::new(params.len()),
        params,
        near_floor: 0,
        history: TrainHistory::default(),
    };
    let check = if config.gradient_check {
        let err = gradient_check(program, counts, model0, config, FD_GATE_PARAMS, FD_GATE_STEP)?;
        if !(err < FD_GATE_TOL) {
            return Err(Error::Numeric(format!(
                "gradient check failed: relative error {err:.3e} against finite differences exceeds {FD_GATE_TOL:e}"
            )));
        }
        Some(err)
    } else {
        None
    };
    let mut res = run_loop(program, counts, model0, config, checkpoint_dir, state)?;
    res.gradient_check = check;
    Ok(res)
}

/// Continues a run from a checkpoint written by [`train`]. The trajectory
/// settings and the data must match the original run.
pub fn resume(
    checkpoint: &Path,
    program: &NoisyProgram,
    counts: &CountsDistribution,
    model0: &NoiseModel,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainResult> {
    config.validate()?;
    check_inputs(program, counts, model0)?;
    let text = std::fs::read_to_string(checkpoint)?;
    let cp: Checkpoint = serde_json::from_str(&text).map_err(|e| Error::Format(format!("checkpoint: {e}")))?;
    if cp.version != CHECKPOINT_VERSION {
        return Err(Error::Format(format!("unsupported checkpoint version {}", cp.version)));
    }
    if cp.config_hash != config.trajectory_hash() {
        return Err(Error::Config("training settings differ from the checkpointed run".into()));
    }
    if cp.data_hash != data_hash(program, counts, model0) {
        return Err(Error::Config("circuit, counts or model layout differ from the checkpointed run".into()));
    }
    let n = model0.num_params();
    if cp.layout != layout(model0)
        || cp.params.len() != n
        || cp.best_params.len() != n
        || cp.optimizer.m.len() != n
        || cp.optimizer.v.len() != n
    {
        return Err(Error::Format("checkpoint parameter layout does not match the model".into()));
    }
    if cp.params.iter().chain(&cp.best_params).any(|x| !x.is_finite()) {
        return Err(Error::Format("checkpoint holds non-finite parameters".into()));
    }
    let state = LoopState {
        iteration: cp.iteration,
        params: cp.params,
        best_params: cp.best_params,
        best_loss: cp.best_loss,
        opt: cp.optimizer,
        near_floor: cp.near_floor,
        history: cp.history,
    };
    run_loop(program, counts, model0, config, checkpoint_dir, state)
}

fn check_inputs(program: &NoisyProgram, counts: &CountsDistribution, model: &NoiseModel) -> Result<()> {
    if program.measured.len() != counts.num_bits() {
        return Err(Error::Shape(format!(
            "program measures {} bits but counts have {}",
            program.measured.len(),
            counts.num_bits()
        )));
    }
    for k in program.channel_keys() {
        if !model.contains(k) {
            return Err(Error::Coverage(k.to_string()));
        }
    }
    Ok(())
}

pub fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join(format!("checkpoint_{iteration:06}.json"))
}

fn run_loop(
    program: &NoisyProgram,
    counts: &CountsDistribution,
    model0: &NoiseModel,
    config: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut s: LoopState,
) -> Result<TrainResult> {
    let floor = losses::shannon_entropy(counts);
    let hp = AdamW::from_config(config);
    let early = config.early_stop && config.loss == LossKind::Nll;
    let (cfg_hash, dhash) = (config.trajectory_hash(), data_hash(program, counts, model0));
    let start = Instant::now();
    let mut model = model0.clone();
    let mut stop = StopReason::Budget;
    if let Some(dir) = checkpoint_dir {
        std::fs::create_dir_all(dir)?;
    }

    while s.iteration < config.max_iters {
        model.set_flat_params(&s.params)?;
        let (loss, grad) = match loss_and_grad(program, counts, &model, config) {
            Ok(v) => v,
            Err(e) if e.is_numeric() => {
                stop = StopReason::Diverged(format!("iteration {}: {e}", s.iteration));
                break;
            }
            Err(e) => return Err(e),
        };
        let grad_norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        s.history.records.push(IterRecord { iter: s.iteration, loss, grad_norm, seconds: start.elapsed().as_secs_f64() });
        if loss < s.best_loss {
            s.best_loss = loss;
            s.best_params.clone_from(&s.params);
        }
        if config.log_every > 0 && s.iteration % config.log_every == 0 {
            log::info!("iter {:5} loss {:.6} gap {:.3e} |g| {:.3e}", s.iteration, loss, loss - floor, grad_norm);
        }
        if let Err(e) = adamw_step(&mut s.params, &grad, &mut s.opt, &hp) {
            let at = grad.iter().position(|g| !g.is_finite()).and_then(|i| locate_param(&model, i));
            let msg = match at {
                Some((k, j)) => format!("iteration {}: non-finite gradient for {k}[{j}]", s.iteration),
                None => format!("iteration {}: {e}", s.iteration),
            };
            stop = StopReason::Diverged(msg);
            break;
        }
        s.iteration += 1;
        s.near_floor = if loss - floor < EARLY_STOP_GAP { s.near_floor + 1 } else { 0 };
        if let Some(dir) = checkpoint_dir {
            if config.checkpoint_every > 0 && s.iteration % config.checkpoint_every == 0 {
                let cp = Checkpoint {
                    version: CHECKPOINT_VERSION,
                    config_hash: cfg_hash.clone(),
                    data_hash: dhash.clone(),
                    iteration: s.iteration,
                    layout: layout(model0),
                    params: s.params.clone(),
                    best_params: s.best_params.clone(),
                    best_loss: s.best_loss,
                    optimizer: s.opt.clone(),
                    near_floor: s.near_floor,
                    history: s.history.clone(),
                };
                std::fs::write(checkpoint_path(dir, s.iteration), serde_json::to_string(&cp)?)?;
            }
        }
        if early && s.near_floor >= EARLY_STOP_PATIENCE {
            stop = StopReason::Converged;
            break;
        }
    }
    if let StopReason::Diverged(msg) = &stop {
        log::warn!("training stopped: {msg}");
    }
    let mut best = model0.clone();
    best.set_flat_params(&s.best_params)?;
    let mut last = model0.clone();
    last.set_flat_params(&s.params)?;
    Ok(TrainResult {
        model: best,
        best_loss: s.best_loss,
        last_model: last,
        history: s.history,
        stop,
        entropy_floor: floor,
        gradient_check: None,
    })
}

/// Read-only metrics of a model against counts.
#[derive(Clone, Debug)]
pub struct Evaluation {
    pub nll: f64,
    pub ot: f64,
    pub ot_residual: f64,
    pub classical_fidelity: f64,
    pub entropy: f64,
    pub infidelity: Vec<InfidelityRow>,
}

pub fn evaluate(
    program: &NoisyProgram,
    counts: &CountsDistribution,
    model: &NoiseModel,
    config: &TrainConfig,
) -> Result<Evaluation> {
    check_inputs(program, counts, model)?;
    let st = mpdo::run_model(program, model, config.sim())?;
    let mut e = Eager::new();
    let src = MpdoSource { state: &st, measured: &program.measured };
    let nll = losses::nll(&mut e, &src, counts)?.scalar_value().re;
    let ot_cfg = config.loss.ot_config().unwrap_or_default();
    let (ot, diag) = losses::ot_loss(&mut e, &src, counts, &ot_cfg)?;
    Ok(Evaluation {
        nll,
        ot: ot.scalar_value().re,
        ot_residual: diag.residual,
        classical_fidelity: fidelity_against(&st, &program.measured, counts)?,
        entropy: losses::shannon_entropy(counts),
        infidelity: infidelity_report(model)?,
    })
}

/// Classical fidelity of the model distribution against counts. Only the
/// observed outcomes contribute, so no table over all outcomes is needed.
pub fn fidelity_against(st: &mpdo::MpdoState<ComplexTensor>, measured: &[usize], counts: &CountsDistribution) -> Result<f64> {
    let mut e = Eager::new();
    let src = MpdoSource { state: st, measured };
    let freq = counts.frequencies();
    let idx: Vec<usize> = freq.iter().map(|f| f.0).collect();
    let p = src.probs(&mut e, &idx)?;
    let bc: f64 = p.data().iter().zip(&freq).map(|(pz, f)| (pz.re.max(0.0) * f.1).sqrt()).sum();
    Ok(bc * bc)
}

/// Random model whose channels each match the RMS of the corresponding
/// channel of `model`, drawn from a Gaussian and rescaled.
pub fn matched_random(model: &NoiseModel, seed: u64) -> Result<NoiseModel> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = model.clone();
    for (k, p) in model.channels() {
        let n = p.theta().len();
        let target = (p.theta().iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        let mut theta: Vec<f64> = (0..n).map(|_| rng.sample(StandardNormal)).collect();
        let rms = (theta.iter().map(|x| x * x).sum::<f64>() / n as f64).sqrt();
        let scale = if rms > 0.0 { target / rms } else { 0.0 };
        theta.iter_mut().for_each(|x| *x *= scale);
        out.set(*k, ChannelParams::new(theta, p.d(), p.n_kraus())?)?;
    }
    Ok(out)
}
