//! Device-wide noise model: one learnable channel per role, lowering of an
//! ideal circuit into a noisy program, JSON persistence and the infidelity
//! report.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channels::{self, ChannelParams, KrausSet};
use crate::circuit_io::{crosstalk_neighbors, Circuit, CouplingMap, Gate, GateType};
use crate::error::{Error, Result};

/// Model file format version.
pub const MODEL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ChannelKey {
    Prep,
    Meas,
    Gate(GateType),
    Crosstalk(GateType),
}

impl ChannelKey {
    /// Channel dimension: 4 for two-qubit gate channels, else 2.
    pub fn dim(self) -> usize {
        match self {
            ChannelKey::Gate(g) if g.arity() == 2 => 4,
            _ => 2,
        }
    }

    /// The paper-style label used in reports.
    pub fn label(self) -> String {
        match self {
            ChannelKey::Prep => "Prep".into(),
            ChannelKey::Meas => "Meas".into(),
            ChannelKey::Gate(g) => g.name().to_uppercase(),
            ChannelKey::Crosstalk(g) => format!("{} crosstalk", g.name().to_uppercase()),
        }
    }
}

impl fmt::Display for ChannelKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChannelKey::Prep => write!(f, "prep"),
            ChannelKey::Meas => write!(f, "meas"),
            ChannelKey::Gate(g) => write!(f, "gate:{}", g.name()),
            ChannelKey::Crosstalk(g) => write!(f, "crosstalk:{}", g.name()),
        }
    }
}

impl FromStr for ChannelKey {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Format(format!("unknown channel key '{s}'"));
        match s {
            "prep" => Ok(ChannelKey::Prep),
            "meas" => Ok(ChannelKey::Meas),
            _ => {
                let (kind, gate) = s.split_once(':').ok_or_else(bad)?;
                let g = GateType::from_name(gate).ok_or_else(bad)?;
                match kind {
                    "gate" => Ok(ChannelKey::Gate(g)),
                    "crosstalk" => Ok(ChannelKey::Crosstalk(g)),
                    _ => Err(bad()),
                }
            }
        }
    }
}

/// Keys for a set of gate types: Prep, Meas, and Gate/Crosstalk per type.
pub fn keys_for(gate_types: &[GateType]) -> Vec<ChannelKey> {
    let mut keys = vec![ChannelKey::Prep, ChannelKey::Meas];
    for &g in gate_types {
        keys.push(ChannelKey::Gate(g));
        keys.push(ChannelKey::Crosstalk(g));
    }
    keys.sort();
    keys.dedup();
    keys
}

/// The native gate set of the reference device (√X, RZ, X, CZ).
pub const NATIVE_GATES: [GateType; 4] = [GateType::Sx, GateType::Rz, GateType::X, GateType::Cz];

#[derive(Clone, Debug, PartialEq)]
pub struct NoiseModel {
    n_kraus: usize,
    channels: BTreeMap<ChannelKey, ChannelParams>,
    pub metadata: BTreeMap<String, String>,
}

impl NoiseModel {
    /// All θ = 0: every channel is the identity.
    pub fn init_identity(gate_types: &[GateType], n_kraus: usize) -> Result<Self> {
        if gate_types.is_empty() {
            return Err(Error::Config("noise model needs at least one gate type".into()));
        }
        if n_kraus == 0 {
            return Err(Error::Config("n_kraus must be positive".into()));
        }
        let channels = keys_for(gate_types).into_iter().map(|k| (k, ChannelParams::zeros(k.dim(), n_kraus))).collect();
        Ok(NoiseModel { n_kraus, channels, metadata: BTreeMap::new() })
    }

    /// θ entries i.i.d. N(0, σ²), channels drawn in key order from one seeded stream.
    pub fn init_random(gate_types: &[GateType], n_kraus: usize, sigma: f64, seed: u64) -> Result<Self> {
        if !(sigma >= 0.0) || !sigma.is_finite() {
            return Err(Error::Domain(format!("sigma must be a finite non-negative number, got {sigma}")));
        }
        let mut m = Self::init_identity(gate_types, n_kraus)?;
        if sigma == 0.0 {
            return Ok(m);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (k, p) in m.channels.iter_mut() {
            *p = ChannelParams::random(k.dim(), n_kraus, sigma, &mut rng)?;
        }
        Ok(m)
    }

    pub fn n_kraus(&self) -> usize {
        self.n_kraus
    }

    pub fn keys(&self) -> impl Iterator<Item = ChannelKey> + '_ {
        self.channels.keys().copied()
    }

    pub fn channels(&self) -> &BTreeMap<ChannelKey, ChannelParams> {
        &self.channels
    }

    pub fn get(&self, key: ChannelKey) -> Option<&ChannelParams> {
        self.channels.get(&key)
    }

    pub fn contains(&self, key: ChannelKey) -> bool {
        self.channels.contains_key(&key)
    }

    /// Replaces one channel; the key must exist and the shape must match.
    pub fn set(&mut self, key: ChannelKey, p: ChannelParams) -> Result<()> {
        let cur = self.channels.get_mut(&key).ok_or_else(|| Error::Coverage(format!("model has no channel {key}")))?;
        if p.d() != key.dim() || p.n_kraus() != self.n_kraus {
            return Err(Error::ParamShape { expected: cur.theta().len(), got: p.theta().len() });
        }
        *cur = p;
        Ok(())
    }

    pub fn kraus(&self, key: ChannelKey) -> Result<KrausSet> {
        channels::kraus_from_params(self.get(key).ok_or_else(|| Error::Coverage(format!("model has no channel {key}")))?)
    }

    pub fn num_params(&self) -> usize {
        self.channels.values().map(|p| p.theta().len()).sum()
    }

    /// Concatenation of all θ in key order.
    pub fn flat_params(&self) -> Vec<f64> {
        self.channels.values().flat_map(|p| p.theta().iter().copied()).collect()
    }

    /// Inverse of [`flat_params`](Self::flat_params).
    pub fn set_flat_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(Error::ParamShape { expected: self.num_params(), got: flat.len() });
        }
        let mut off = 0;
        for p in self.channels.values_mut() {
            let n = p.theta().len();
            p.theta_mut().copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(())
    }

    /// sqrt(mean θ²) over all channels.
    pub fn rms_magnitude(&self) -> f64 {
        let flat = self.flat_params();
        if flat.is_empty() {
            return 0.0;
        }
        (flat.iter().map(|x| x * x).sum::<f64>() / flat.len() as f64).sqrt()
    }

    pub fn to_json(&self) -> String {
        let file = ModelFile {
            version: MODEL_VERSION,
            n_kraus: self.n_kraus,
            channels: self
                .channels
                .iter()
                .map(|(k, p)| (k.to_string(), ChannelEntry { d: p.d(), theta: p.theta().to_vec() }))
                .collect(),
            metadata: self.metadata.clone(),
        };
        crate::json::to_string(&file).expect("serializable")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let file: ModelFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("model file: {e}")))?;
        if file.version != MODEL_VERSION {
            return Err(Error::Format(format!("model version {} is not supported (expected {MODEL_VERSION})", file.version)));
        }
        let mut channels = BTreeMap::new();
        for (name, entry) in file.channels {
            let key: ChannelKey = name.parse()?;
            if entry.d != key.dim() {
                return Err(Error::Format(format!("channel {key} has d = {} (expected {})", entry.d, key.dim())));
            }
            if entry.theta.iter().any(|x| !x.is_finite()) {
                return Err(Error::Format(format!("channel {key} has non-finite parameters")));
            }
            let p = ChannelParams::new(entry.theta, entry.d, file.n_kraus)
                .map_err(|e| Error::Format(format!("channel {key}: {e}")))?;
            channels.insert(key, p);
        }
        for k in [ChannelKey::Prep, ChannelKey::Meas] {
            if !channels.contains_key(&k) {
                return Err(Error::Format(format!("model file lacks the {k} channel")));
            }
        }
        for k in channels.keys() {
            let partner = match *k {
                ChannelKey::Gate(g) => Some(ChannelKey::Crosstalk(g)),
                ChannelKey::Crosstalk(g) => Some(ChannelKey::Gate(g)),
                _ => None,
            };
            if let Some(p) = partner {
                if !channels.contains_key(&p) {
                    return Err(Error::Format(format!("model file has {k} but lacks {p}")));
                }
            }
        }
        Ok(NoiseModel { n_kraus: file.n_kraus, channels, metadata: file.metadata })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[derive(Serialize, Deserialize)]
struct ChannelEntry {
    d: usize,
    theta: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    version: u32,
    n_kraus: usize,
    channels: BTreeMap<String, ChannelEntry>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// One step of a noisy program; `sites` are chain positions.
#[derive(Clone, Debug, PartialEq)]
pub enum Step {
    Gate { gate: Gate, sites: Vec<usize> },
    Channel { key: ChannelKey, sites: Vec<usize> },
}

#[derive(Clone, Debug, PartialEq)]
pub struct NoisyProgram {
    pub num_sites: usize,
    pub steps: Vec<Step>,
    /// Measured sites from the most significant classical bit down.
    pub measured: Vec<usize>,
}

impl NoisyProgram {
    pub fn channel_keys(&self) -> Vec<ChannelKey> {
        let mut v: Vec<ChannelKey> = self
            .steps
            .iter()
            .filter_map(|s| match s {
                Step::Channel { key, .. } => Some(*key),
                _ => None,
            })
            .collect();
        v.sort();
        v.dedup();
        v
    }

    pub fn count_channels(&self, pred: impl Fn(ChannelKey) -> bool) -> usize {
        self.steps.iter().filter(|s| matches!(s, Step::Channel { key, .. } if pred(*key))).count()
    }
}

/// Expands a chain-routed circuit into gates and channel applications:
/// Prep on every site; per gate, the gate, its Gate channel, then the gate
/// type's Crosstalk channel on each coupling-map neighbor in ascending site
/// order; Meas on each measured site at the end. Synthetic gates get no
/// channels. The coupling map is indexed by device qubit (the circuit layout).
pub fn lower(c: &Circuit, m: &NoiseModel, map: &CouplingMap) -> Result<NoisyProgram> {
    lower_with(c, map, |k| m.contains(k))
}

/// Lowering against any key predicate; used when the caller holds Kraus sets
/// rather than a parameterized model.
pub fn lower_with(c: &Circuit, map: &CouplingMap, has: impl Fn(ChannelKey) -> bool) -> Result<NoisyProgram> {
    c.validate()?;
    let need = |k: ChannelKey| if has(k) { Ok(()) } else { Err(Error::Coverage(format!("noise model has no channel {k}"))) };
    need(ChannelKey::Prep)?;
    if !c.measurements.is_empty() {
        need(ChannelKey::Meas)?;
    }
    // site_of[device qubit] tracks where each device qubit sits as synthetic
    // SWAPs move it along the chain.
    let mut layout = c.layout.clone();
    let mut site_of = std::collections::HashMap::new();
    for (s, &d) in layout.iter().enumerate() {
        site_of.insert(d, s);
    }
    let mut steps: Vec<Step> = (0..c.num_qubits).map(|s| Step::Channel { key: ChannelKey::Prep, sites: vec![s] }).collect();
    for ins in &c.instructions {
        if ins.qubits.len() == 2 && ins.qubits[0].abs_diff(ins.qubits[1]) != 1 {
            return Err(Error::Mapping(format!("gate on non-adjacent sites {:?}; route the circuit first", ins.qubits)));
        }
        steps.push(Step::Gate { gate: ins.gate, sites: ins.qubits.clone() });
        if ins.gate == Gate::Swap {
            let (a, b) = (ins.qubits[0], ins.qubits[1]);
            layout.swap(a, b);
            site_of.insert(layout[a], a);
            site_of.insert(layout[b], b);
            continue;
        }
        if ins.synthetic {
            continue;
        }
        let g = ins.gate.gate_type().expect("non-swap gate");
        need(ChannelKey::Gate(g))?;
        need(ChannelKey::Crosstalk(g))?;
        steps.push(Step::Channel { key: ChannelKey::Gate(g), sites: ins.qubits.clone() });
        let devs: Vec<usize> = ins.qubits.iter().map(|&s| layout[s]).collect();
        let mut neigh: Vec<usize> =
            crosstalk_neighbors(map, &devs)?.into_iter().filter_map(|d| site_of.get(&d).copied()).collect();
        neigh.sort_unstable();
        for s in neigh {
            steps.push(Step::Channel { key: ChannelKey::Crosstalk(g), sites: vec![s] });
        }
    }
    let measured: Vec<usize> = c.register().iter().map(|&(q, _)| q).collect();
    let mut meas_sites = measured.clone();
    meas_sites.sort_unstable();
    for s in meas_sites {
        steps.push(Step::Channel { key: ChannelKey::Meas, sites: vec![s] });
    }
    Ok(NoisyProgram { num_sites: c.num_qubits, steps, measured })
}

#[derive(Clone, Debug, PartialEq)]
pub struct InfidelityRow {
    pub key: ChannelKey,
    pub d: usize,
    pub infidelity: f64,
}

/// 1 − F_avg per channel, in key order.
pub fn infidelity_report(m: &NoiseModel) -> Result<Vec<InfidelityRow>> {
    m.keys()
        .map(|k| {
            let kr = m.kraus(k)?;
            Ok(InfidelityRow { key: k, d: kr.d(), infidelity: 1.0 - channels::average_gate_fidelity(&kr) })
        })
        .collect()
}
