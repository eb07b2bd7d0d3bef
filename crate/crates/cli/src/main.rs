//! `noisefit`: learn, apply and assess Stinespring noise models.

mod manifest;
mod reference;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{ArgGroup, Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use noisefit::channels::{choi, depolarizing_2q_channel, process_fidelity, trace_distance};
use noisefit::circuit_io::{
    bitstring, load_counts, parse_qasm, to_chain, BitOrder, Circuit, CountsDistribution, CouplingMap, GateType,
};
use noisefit::labs_app::{self, FeasibilityRow, LabsConfig, QaoaParams};
use noisefit::mpdo::{self, SimConfig};
use noisefit::noise_model::{infidelity_report, lower, lower_with, ChannelKey, NoiseModel, NoisyProgram};
use noisefit::oracle_sim::synth_counts;
use noisefit::par::Exec;
use noisefit::trainer::{self, LossKind, StopReason, TrainConfig};
use noisefit::{Error, Result};

use manifest::RunManifest;
use reference::ReferenceSpec;

/// Largest register for which `simulate` writes the full probability table.
const TABLE_MAX_BITS: usize = 16;

#[derive(Parser)]
#[command(name = "noisefit", version, about = "Learn noise models from measurement counts with an MPDO simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Where to write the run manifest (default: beside the primary output).
    #[arg(long, global = true)]
    manifest: Option<PathBuf>,
    /// Validate inputs and settings, write the manifest, compute nothing.
    #[arg(long, global = true)]
    dry_run: bool,
}

#[derive(Subcommand)]
enum Command {
    /// Fit a noise model to measured counts.
    Train(TrainArgs),
    /// Exact outcome probabilities of a circuit under a model.
    Simulate(SimulateArgs),
    /// Sampled counts of a circuit under a model.
    Sample(SampleArgs),
    /// Counts from the dense reference simulator with known channels.
    Synth(SynthArgs),
    /// Per-channel process fidelity and trace distance between two models.
    Fidelity(FidelityArgs),
    /// Per-channel average-gate infidelity of a model.
    Report(ReportArgs),
    /// Parity-checked LABS QAOA feasibility study.
    Labs(LabsArgs),
}

#[derive(Args, Serialize)]
struct CircuitArgs {
    /// OpenQASM 2 circuit.
    #[arg(long)]
    circuit: PathBuf,
    /// Coupling map JSON; defaults to a line over the device qubits.
    #[arg(long)]
    coupling: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct BondArgs {
    /// Bond dimension cap.
    #[arg(long, default_value_t = 8)]
    chi: usize,
    /// Inner dimension cap (default 2·chi).
    #[arg(long)]
    kappa: Option<usize>,
}

impl BondArgs {
    fn sim(&self) -> SimConfig {
        SimConfig::new(self.chi).with_kappa(self.kappa.unwrap_or(2 * self.chi))
    }
}

#[derive(Clone, Copy, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum LossArg {
    Nll,
    Ot,
}

#[derive(Args, Serialize)]
struct TrainArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    /// Measured counts JSON.
    #[arg(long)]
    counts: PathBuf,
    /// Bitstrings in the counts file list classical bit 0 first.
    #[arg(long)]
    lsb_first: bool,
    /// Output model JSON.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t = LossArg::Nll)]
    loss: LossArg,
    #[command(flatten)]
    bond: BondArgs,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 0.0)]
    weight_decay: f64,
    /// Iteration budget.
    #[arg(long, default_value_t = 2000)]
    iters: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Kraus operators per channel.
    #[arg(long, default_value_t = 4)]
    n_kraus: usize,
    /// Scale of the random initial parameters.
    #[arg(long, default_value_t = 1e-3)]
    init_sigma: f64,
    /// Start from this model instead of a random one.
    #[arg(long)]
    init_model: Option<PathBuf>,
    /// Sinkhorn regularization for --loss ot.
    #[arg(long, default_value_t = 0.1)]
    ot_eps: f64,
    /// Sinkhorn iterations for --loss ot.
    #[arg(long, default_value_t = 1024)]
    ot_iters: usize,
    #[arg(long)]
    checkpoint_dir: Option<PathBuf>,
    /// Checkpoint interval when --checkpoint-dir is set.
    #[arg(long, default_value_t = 100)]
    checkpoint_every: usize,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    /// History CSV (default: <out>.history.csv).
    #[arg(long)]
    history: Option<PathBuf>,
    #[arg(long, default_value_t = 50)]
    log_every: usize,
    /// Run the full budget even after the NLL reaches the entropy floor.
    #[arg(long)]
    no_early_stop: bool,
    /// Skip the finite-difference gradient check.
    #[arg(long)]
    no_gradient_check: bool,
}

#[derive(Args, Serialize)]
struct SimulateArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    bond: BondArgs,
    /// Output probability table JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SampleArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    #[arg(long)]
    model: PathBuf,
    #[command(flatten)]
    bond: BondArgs,
    #[arg(long, default_value_t = 16384)]
    shots: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output counts JSON.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args, Serialize)]
struct SynthArgs {
    #[command(flatten)]
    circuit: CircuitArgs,
    /// Injected channels, e.g. bitflip:0.001,depol2q:0.001.
    #[arg(long)]
    reference_spec: ReferenceArg,
    #[arg(long, default_value_t = 16384)]
    shots: u64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
}

/// Keeps the spec text for the manifest.
#[derive(Clone, Serialize)]
#[serde(into = "String")]
struct ReferenceArg {
    text: String,
    spec: ReferenceSpec,
}

impl std::str::FromStr for ReferenceArg {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        Ok(ReferenceArg { text: s.into(), spec: s.parse()? })
    }
}

impl From<ReferenceArg> for String {
    fn from(r: ReferenceArg) -> String {
        r.text
    }
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("second").required(true).args(["model_b", "reference_spec"])))]
struct FidelityArgs {
    #[arg(long, alias = "model")]
    model_a: PathBuf,
    #[arg(long)]
    model_b: Option<PathBuf>,
    /// Compare against injected channels instead of a second model.
    #[arg(long)]
    reference_spec: Option<ReferenceArg>,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
struct ReportArgs {
    #[arg(long)]
    model: PathBuf,
    /// Output CSV (default: stdout).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args, Serialize)]
#[command(group(ArgGroup::new("noise").required(true).args(["model", "reference_spec"])))]
struct LabsArgs {
    /// Model whose CZ channel is applied to the phase separator.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Injected channels instead of a model; only depol2q is used.
    #[arg(long)]
    reference_spec: Option<ReferenceArg>,
    #[arg(long, value_delimiter = ',', required = true)]
    n_list: Vec<usize>,
    /// One value for every N, or one per N.
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    gamma: Vec<f64>,
    #[arg(long, value_delimiter = ',', allow_negative_numbers = true)]
    beta: Vec<f64>,
    /// Pick (γ, β) per N from a points×points noiseless grid instead.
    #[arg(long, conflicts_with_all = ["gamma", "beta"])]
    grid: Option<usize>,
    #[arg(long, default_value_t = 16384)]
    shots: u64,
    #[arg(long, default_value_t = 32)]
    chi: usize,
    #[arg(long, default_value_t = 32)]
    kappa: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV.
    #[arg(long)]
    out: PathBuf,
    /// JSON summary (default: <out>.summary.json).
    #[arg(long)]
    summary: Option<PathBuf>,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

/// 2 input, 3 numeric failure, 4 resource guard.
fn exit_code(e: &Error) -> u8 {
    match e.root() {
        Error::NonFinite { .. } | Error::Numeric(_) => 3,
        Error::Resource(_) => 4,
        _ => 2,
    }
}

fn run(cli: Cli) -> Result<()> {
    let dry = cli.dry_run;
    let (name, out): (&str, Option<&Path>) = match &cli.command {
        Command::Train(a) => ("train", Some(&a.out)),
        Command::Simulate(a) => ("simulate", Some(&a.out)),
        Command::Sample(a) => ("sample", Some(&a.out)),
        Command::Synth(a) => ("synth", Some(&a.out)),
        Command::Fidelity(a) => ("fidelity", a.out.as_deref()),
        Command::Report(a) => ("report", a.out.as_deref()),
        Command::Labs(a) => ("labs", Some(&a.out)),
    };
    let manifest_path = cli.manifest.clone().unwrap_or_else(|| manifest::default_path(out, name));
    let (mut m, res) = match &cli.command {
        Command::Train(a) => with_manifest(name, a, Some(a.seed), dry, |m| cmd_train(a, m, dry)),
        Command::Simulate(a) => with_manifest(name, a, None, dry, |m| cmd_simulate(a, m, dry)),
        Command::Sample(a) => with_manifest(name, a, Some(a.seed), dry, |m| cmd_sample(a, m, dry)),
        Command::Synth(a) => with_manifest(name, a, Some(a.seed), dry, |m| cmd_synth(a, m, dry)),
        Command::Fidelity(a) => with_manifest(name, a, None, dry, |m| cmd_fidelity(a, m, dry)),
        Command::Report(a) => with_manifest(name, a, None, dry, |m| cmd_report(a, m, dry)),
        Command::Labs(a) => with_manifest(name, a, Some(a.seed), dry, |m| cmd_labs(a, m, dry)),
    };
    if let Err(e) = &res {
        m.summary = Some(serde_json::json!({ "error": e.to_string(), "exit_code": exit_code(e) }));
    }
    m.finish(&manifest_path)?;
    res
}

fn with_manifest<A: Serialize>(
    name: &str,
    args: &A,
    seed: Option<u64>,
    dry: bool,
    f: impl FnOnce(&mut RunManifest) -> Result<()>,
) -> (RunManifest, Result<()>) {
    let mut m = RunManifest::new(name, args, seed, dry);
    let r = f(&mut m);
    (m, r)
}

/// Parses, drops idle qubits and routes onto a chain.
fn load_circuit(m: &mut RunManifest, path: &Path) -> Result<Circuit> {
    m.input(path)?;
    to_chain(&parse_qasm(&std::fs::read_to_string(path)?)?)
}

fn load_coupling(m: &mut RunManifest, path: Option<&Path>, c: &Circuit) -> Result<CouplingMap> {
    match path {
        Some(p) => {
            m.input(p)?;
            CouplingMap::load(p)
        }
        None => Ok(CouplingMap::linear(c.layout.iter().max().map_or(0, |&q| q + 1))),
    }
}

fn load_model(m: &mut RunManifest, path: &Path) -> Result<NoiseModel> {
    m.input(path)?;
    NoiseModel::load(path)
}

fn program(m: &mut RunManifest, a: &CircuitArgs, model: &NoiseModel) -> Result<NoisyProgram> {
    let c = load_circuit(m, &a.circuit)?;
    let map = load_coupling(m, a.coupling.as_deref(), &c)?;
    lower(&c, model, &map)
}

fn with_suffix(p: &Path, suffix: &str) -> PathBuf {
    let mut s = p.as_os_str().to_owned();
    s.push(suffix);
    PathBuf::from(s)
}

fn f17(x: f64) -> String {
    format!("{x:.16e}")
}

fn emit(m: &mut RunManifest, out: Option<&Path>, text: &str) -> Result<()> {
    match out {
        Some(p) => m.write(p, text),
        None => {
            print!("{text}");
            Ok(())
        }
    }
}

fn cmd_train(a: &TrainArgs, m: &mut RunManifest, dry: bool) -> Result<()> {
    let config = TrainConfig {
        loss: match a.loss {
            LossArg::Nll => LossKind::Nll,
            LossArg::Ot => LossKind::ot(&noisefit::losses::OtConfig { eps: a.ot_eps, iters: a.ot_iters, ..Default::default() }),
        },
        learning_rate: a.lr,
        weight_decay: a.weight_decay,
        max_iters: a.iters,
        chi: a.bond.chi,
        kappa: a.bond.kappa.unwrap_or(2 * a.bond.chi),
        seed: a.seed,
        checkpoint_every: if a.checkpoint_dir.is_some() { a.checkpoint_every } else { 0 },
        log_every: a.log_every,
        early_stop: !a.no_early_stop,
        gradient_check: !a.no_gradient_check,
        ..TrainConfig::default()
    };
    config.validate()?;
    if !(a.init_sigma >= 0.0) {
        return Err(Error::Domain(format!("init sigma must be non-negative, got {}", a.init_sigma)));
    }
    let c = load_circuit(m, &a.circuit.circuit)?;
    let map = load_coupling(m, a.circuit.coupling.as_deref(), &c)?;
    m.input(&a.counts)?;
    let counts = load_counts(&a.counts, if a.lsb_first { BitOrder::LsbFirst } else { BitOrder::MsbFirst })?;
    let model0 = match &a.init_model {
        Some(p) => load_model(m, p)?,
        None => NoiseModel::init_random(&c.gate_types(), a.n_kraus, a.init_sigma, a.seed)?,
    };
    let prog = lower(&c, &model0, &map)?;
    if prog.measured.len() != counts.num_bits() {
        return Err(Error::Shape(format!(
            "circuit measures {} bits but counts have {}",
            prog.measured.len(),
            counts.num_bits()
        )));
    }
    if let Some(r) = &a.resume {
        m.input(r)?;
    }
    if dry {
        return Ok(());
    }
    if let Some(d) = &a.checkpoint_dir {
        std::fs::create_dir_all(d)?;
    }

    let t = Instant::now();
    let res = match &a.resume {
        Some(r) => trainer::resume(r, &prog, &counts, &model0, &config, a.checkpoint_dir.as_deref())?,
        None => trainer::train(&prog, &counts, &model0, &config, a.checkpoint_dir.as_deref())?,
    };
    m.lap("train", t);

    let mut model = res.model.clone();
    let stop = match &res.stop {
        StopReason::Budget => "budget".to_string(),
        StopReason::Converged => "converged".to_string(),
        StopReason::Diverged(msg) => format!("diverged: {msg}"),
    };
    model.metadata.insert("loss".into(), serde_json::to_value(config.loss)?.to_string());
    model.metadata.insert("best_loss".into(), f17(res.best_loss));
    model.metadata.insert("entropy_floor".into(), f17(res.entropy_floor));
    model.metadata.insert("iterations".into(), res.history.records.len().to_string());
    model.metadata.insert("stop".into(), stop.clone());
    m.write(&a.out, &model.to_json())?;
    let history = a.history.clone().unwrap_or_else(|| with_suffix(&a.out, ".history.csv"));
    m.write(&history, &res.history.to_csv())?;
    if let Some(d) = &a.checkpoint_dir {
        m.artifacts.insert(d.display().to_string(), "directory".into());
    }
    m.summary = Some(serde_json::json!({
        "best_loss": res.best_loss,
        "entropy_floor": res.entropy_floor,
        "gap": res.best_loss - res.entropy_floor,
        "iterations": res.history.records.len(),
        "gradient_check_rel_err": res.gradient_check,
        "stop": stop,
    }));
    match res.stop {
        StopReason::Diverged(msg) => Err(Error::Numeric(format!("training diverged ({msg}); best model written"))),
        _ => Ok(()),
    }
}

#[derive(Serialize)]
struct ProbabilityTable {
    bits: usize,
    probabilities: BTreeMap<String, f64>,
}

fn cmd_simulate(a: &SimulateArgs, m: &mut RunManifest, dry: bool) -> Result<()> {
    let sim = a.bond.sim();
    sim.validate()?;
    let model = load_model(m, &a.model)?;
    let prog = program(m, &a.circuit, &model)?;
    let w = prog.measured.len();
    if w > TABLE_MAX_BITS {
        return Err(Error::Resource(format!("{w} measured bits exceed the {TABLE_MAX_BITS}-bit table limit; use sample")));
    }
    if dry {
        return Ok(());
    }
    let t = Instant::now();
    let st = mpdo::run_model(&prog, &model, sim)?;
    let (p, _) = mpdo::clamp_probabilities(&mpdo::probability_table(&st, &prog.measured)?);
    m.lap("simulate", t);
    let table = ProbabilityTable { bits: w, probabilities: p.iter().enumerate().map(|(i, &v)| (bitstring(i, w), v)).collect() };
    m.write(&a.out, &noisefit::json::to_string(&table)?)
}

fn cmd_sample(a: &SampleArgs, m: &mut RunManifest, dry: bool) -> Result<()> {
    let sim = a.bond.sim();
    sim.validate()?;
    if a.shots == 0 {
        return Err(Error::Domain("shots must be positive".into()));
    }
    let model = load_model(m, &a.model)?;
    let prog = program(m, &a.circuit, &model)?;
    if dry {
        return Ok(());
    }
    let t = Instant::now();
    let st = mpdo::run_model(&prog, &model, sim)?;
    let counts = mpdo::sample(&st, &prog.measured, a.shots, a.seed, Exec::default_for_build())?;
    m.lap("sample", t);
    m.write(&a.out, &counts.to_json())
}

fn cmd_synth(a: &SynthArgs, m: &mut RunManifest, dry: bool) -> Result<()> {
    let c = load_circuit(m, &a.circuit.circuit)?;
    let map = load_coupling(m, a.circuit.coupling.as_deref(), &c)?;
    let resolver = a.reference_spec.spec.resolver(&c.gate_types())?;
    let prog = lower_with(&c, &map, |k| resolver.contains_key(&k))?;
    if c.num_qubits > noisefit::oracle_sim::MAX_QUBITS {
        return Err(Error::Resource(format!(
            "the dense simulator handles at most {} qubits, circuit has {}",
            noisefit::oracle_sim::MAX_QUBITS,
            c.num_qubits
        )));
    }
    if dry {
        return Ok(());
    }
    let t = Instant::now();
    let counts: CountsDistribution = synth_counts(&prog, &resolver, a.shots, a.seed)?;
    m.lap("synth", t);
    m.write(&a.out, &counts.to_json())
}

fn cmd_fidelity(a: &FidelityArgs, m: &mut RunManifest, dry: bool) -> Result<()> {
    let model = load_model(m, &a.model_a)?;
    let other: BTreeMap<ChannelKey, noisefit::channels::KrausSet> = match (&a.model_b, &a.reference_spec) {
        (Some(p), _) => {
            let b = load_model(m, p)?;
            b.keys().map(|k| b.kraus(k).map(|kr| (k, kr))).collect::<Result<_>>()?
        }
        (None, Some(r)) => {
            let gates: Vec<GateType> = model
                .keys()
                .filter_map(|k| match k {
                    ChannelKey::Gate(g) | ChannelKey::Crosstalk(g) => Some(g),
                    _ => None,
                })
                .collect();
            let mut gates = gates;
            gates.dedup();
            r.spec.resolver(&gates)?
        }
        (None, None) => return Err(Error::Config("pass --model-b or --reference-spec".into())),
    };
    let left: Vec<ChannelKey> = model.keys().collect();
    let right: Vec<ChannelKey> = other.keys().copied().collect();
    if left != right {
        return Err(Error::Config(format!(
            "channel keys differ: {} vs {}",
            left.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" "),
            right.iter().map(|k| k.to_string()).collect::<Vec<_>>().join(" ")
        )));
    }
    if dry {
        return Ok(());
    }
    let mut csv = String::from("channel,process_fidelity,trace_distance\n");
    for k in left {
        let ja = choi(&model.kraus(k)?, true);
        let jb = choi(&other[&k], true);
        csv.push_str(&format!("{k},{},{}\n", f17(process_fidelity(&ja, &jb)?), f17(trace_distance(&ja, &jb)?)));
    }
    emit(m, a.out.as_deref(), &csv)
}

fn cmd_report(a: &ReportArgs, m: &mut RunManifest, dry: bool) -> Result<()> {
    let model = load_model(m, &a.model)?;
    if dry {
        return Ok(());
    }
    let mut csv = String::from("channel,d,infidelity\n");
    for r in infidelity_report(&model)? {
        csv.push_str(&format!("{},{},{}\n", r.key, r.d, f17(r.infidelity)));
    }
    emit(m, a.out.as_deref(), &csv)
}

#[derive(Serialize)]
struct LabsSummary {
    angles: &'static str,
    /// Per N, every grid point with its noiseless ⟨merit⟩, best first.
    #[serde(skip_serializing_if = "BTreeMap::is_empty")]
    grid: BTreeMap<usize, Vec<(f64, f64, f64)>>,
    rows: Vec<FeasibilityRow>,
}

fn cmd_labs(a: &LabsArgs, m: &mut RunManifest, dry: bool) -> Result<()> {
    let config = LabsConfig { shots: a.shots, chi: a.chi, kappa: a.kappa, seed: a.seed, exec: Exec::default_for_build() };
    config.sim().validate()?;
    if a.shots == 0 {
        return Err(Error::Domain("shots must be positive".into()));
    }
    if let Some(&n) = a.n_list.iter().find(|&&n| n < 2) {
        return Err(Error::Domain(format!("LABS needs N ≥ 2, got {n}")));
    }
    let cz = match (&a.model, &a.reference_spec) {
        (Some(p), _) => {
            let model = load_model(m, p)?;
            model
                .kraus(ChannelKey::Gate(GateType::Cz))
                .map_err(|_| Error::Coverage("noise model has no CZ channel".into()))?
        }
        (None, Some(r)) => depolarizing_2q_channel(r.spec.depol2q)?,
        (None, None) => return Err(Error::Config("pass --model or --reference-spec".into())),
    };
    let pick = |v: &[f64], what: &str| -> Result<Vec<f64>> {
        match v.len() {
            1 => Ok(vec![v[0]; a.n_list.len()]),
            l if l == a.n_list.len() => Ok(v.to_vec()),
            0 => Err(Error::Domain(format!("no default angles are shipped: pass --{what} or --grid"))),
            l => Err(Error::Shape(format!("--{what} has {l} values for {} values of N", a.n_list.len()))),
        }
    };
    let mut summary = LabsSummary { angles: "given", grid: BTreeMap::new(), rows: Vec::new() };
    let params: Vec<QaoaParams> = match a.grid {
        Some(0) => return Err(Error::Domain("--grid needs at least one point per axis".into())),
        Some(points) => {
            summary.angles = "grid";
            if dry {
                return Ok(());
            }
            let t = Instant::now();
            let mut best = Vec::new();
            for &n in &a.n_list {
                let g = labs_app::grid_search(n, points, &config)?;
                best.push(g[0].0);
                summary.grid.insert(n, g.iter().map(|(p, v)| (p.gamma, p.beta, *v)).collect());
            }
            m.lap("grid", t);
            best
        }
        None => {
            let (g, b) = (pick(&a.gamma, "gamma")?, pick(&a.beta, "beta")?);
            let params = g.iter().zip(&b).map(|(&g, &b)| QaoaParams::new(g, b)).collect::<Result<Vec<_>>>()?;
            if dry {
                return Ok(());
            }
            params
        }
    };
    let t = Instant::now();
    let rows = labs_app::feasibility_report_kraus(&a.n_list, &params, &cz, &config)?;
    m.lap("feasibility", t);
    let mut csv = format!("{}\n", FeasibilityRow::CSV_HEADER);
    for r in &rows {
        csv.push_str(&r.csv());
        csv.push('\n');
    }
    m.write(&a.out, &csv)?;
    summary.rows = rows;
    let path = a.summary.clone().unwrap_or_else(|| with_suffix(&a.out, ".summary.json"));
    m.write(&path, &noisefit::json::to_string(&summary)?)
}
