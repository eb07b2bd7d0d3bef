//! Circuits, device coupling maps and counts files.

mod counts;
mod coupling;
mod qasm;
mod routing;

pub use counts::{bitstring, index_of, load_counts, save_counts, BitOrder, CountsDistribution};
pub use coupling::{crosstalk_neighbors, CouplingMap};
pub use qasm::{parse_qasm, print_qasm};
pub use routing::{compact_idle, greedy_ordering, route_to_chain, swap_count, to_chain};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg_diff::{ComplexTensor, C64, ONE, ZERO};

/// Gate family without parameters; keys noise channels.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GateType {
    Sx,
    Rz,
    X,
    H,
    Cx,
    Cz,
}

impl GateType {
    pub const ALL: [GateType; 6] = [GateType::Sx, GateType::Rz, GateType::X, GateType::H, GateType::Cx, GateType::Cz];

    pub fn name(self) -> &'static str {
        match self {
            GateType::Sx => "sx",
            GateType::Rz => "rz",
            GateType::X => "x",
            GateType::H => "h",
            GateType::Cx => "cx",
            GateType::Cz => "cz",
        }
    }

    pub fn from_name(s: &str) -> Option<Self> {
        GateType::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn arity(self) -> usize {
        match self {
            GateType::Cx | GateType::Cz => 2,
            _ => 1,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Gate {
    Sx,
    Rz(f64),
    X,
    H,
    Cx,
    Cz,
    /// Routing artifact; never carries noise.
    Swap,
}

impl Gate {
    /// `None` for SWAP.
    pub fn gate_type(&self) -> Option<GateType> {
        Some(match self {
            Gate::Sx => GateType::Sx,
            Gate::Rz(_) => GateType::Rz,
            Gate::X => GateType::X,
            Gate::H => GateType::H,
            Gate::Cx => GateType::Cx,
            Gate::Cz => GateType::Cz,
            Gate::Swap => return None,
        })
    }

    pub fn arity(&self) -> usize {
        match self {
            Gate::Cx | Gate::Cz | Gate::Swap => 2,
            _ => 1,
        }
    }

    /// Unitary in the computational basis. For two-qubit gates the first
    /// operand is the more significant bit; CX controls on the first operand.
    pub fn matrix(&self) -> ComplexTensor {
        let h = std::f64::consts::FRAC_1_SQRT_2;
        let m2 = |a: [C64; 4]| ComplexTensor::new(a.to_vec(), vec![2, 2]).expect("2x2");
        let perm4 = |p: [usize; 4], phase: [C64; 4]| {
            let mut m = ComplexTensor::zeros(&[4, 4]);
            for (col, &row) in p.iter().enumerate() {
                m.set2(row, col, phase[col]);
            }
            m
        };
        match *self {
            Gate::Sx => {
                let a = C64::new(0.5, 0.5);
                let b = C64::new(0.5, -0.5);
                m2([a, b, b, a])
            }
            Gate::Rz(t) => m2([C64::from_polar(1.0, -t / 2.0), ZERO, ZERO, C64::from_polar(1.0, t / 2.0)]),
            Gate::X => m2([ZERO, ONE, ONE, ZERO]),
            Gate::H => m2([C64::new(h, 0.0), C64::new(h, 0.0), C64::new(h, 0.0), C64::new(-h, 0.0)]),
            Gate::Cx => perm4([0, 1, 3, 2], [ONE; 4]),
            Gate::Cz => perm4([0, 1, 2, 3], [ONE, ONE, ONE, -ONE]),
            Gate::Swap => perm4([0, 2, 1, 3], [ONE; 4]),
        }
    }

    fn qasm_name(&self) -> String {
        match self {
            Gate::Rz(t) => format!("rz({t})"),
            Gate::Swap => "swap".into(),
            g => g.gate_type().expect("named gate").name().into(),
        }
    }
}


#[derive(Clone, Debug, PartialEq)]
pub struct Instruction {
    pub gate: Gate,
    pub qubits: Vec<usize>,
    /// Simulator artifact or deliberately noiseless operation.
    pub synthetic: bool,
}

impl Instruction {
    pub fn new(gate: Gate, qubits: &[usize]) -> Self {
        Instruction { gate, qubits: qubits.to_vec(), synthetic: false }
    }

    pub fn synthetic(gate: Gate, qubits: &[usize]) -> Self {
        Instruction { gate, qubits: qubits.to_vec(), synthetic: true }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Circuit {
    pub num_qubits: usize,
    pub num_clbits: usize,
    pub instructions: Vec<Instruction>,
    /// (qubit, classical bit) pairs in program order.
    pub measurements: Vec<(usize, usize)>,
    /// layout[q] is the device qubit that circuit qubit q stands for.
    pub layout: Vec<usize>,
}

impl Circuit {
    pub fn new(num_qubits: usize, num_clbits: usize) -> Self {
        Circuit { num_qubits, num_clbits, instructions: Vec::new(), measurements: Vec::new(), layout: (0..num_qubits).collect() }
    }

    pub fn push(&mut self, gate: Gate, qubits: &[usize]) {
        self.instructions.push(Instruction::new(gate, qubits));
    }

    pub fn push_synthetic(&mut self, gate: Gate, qubits: &[usize]) {
        self.instructions.push(Instruction::synthetic(gate, qubits));
    }

    pub fn measure(&mut self, qubit: usize, clbit: usize) {
        self.measurements.push((qubit, clbit));
    }

    /// Measures qubit i into classical bit i for every qubit.
    pub fn measure_all(&mut self) {
        for q in 0..self.num_qubits {
            self.measure(q, q);
        }
    }

    /// Checks the structural invariants.
    pub fn validate(&self) -> Result<()> {
        if self.layout.len() != self.num_qubits {
            return Err(Error::Shape("layout length differs from qubit count".into()));
        }
        for (k, ins) in self.instructions.iter().enumerate() {
            if ins.qubits.len() != ins.gate.arity() || ins.qubits.iter().any(|&q| q >= self.num_qubits) {
                return Err(Error::Shape(format!("instruction {k} has bad operands {:?}", ins.qubits)));
            }
            if ins.qubits.len() == 2 && ins.qubits[0] == ins.qubits[1] {
                return Err(Error::Shape(format!("instruction {k} repeats qubit {}", ins.qubits[0])));
            }
        }
        let mut seen = vec![false; self.num_clbits];
        for &(q, c) in &self.measurements {
            if q >= self.num_qubits || c >= self.num_clbits {
                return Err(Error::Shape(format!("measurement {q}->{c} out of range")));
            }
            if std::mem::replace(&mut seen[c], true) {
                return Err(Error::Shape(format!("classical bit {c} measured twice")));
            }
        }
        Ok(())
    }

    /// Measured qubits ordered from the most significant classical bit down,
    /// i.e. in the order their bits appear in a counts bitstring.
    pub fn register(&self) -> Vec<(usize, usize)> {
        let mut r = self.measurements.clone();
        r.sort_by(|a, b| b.1.cmp(&a.1));
        r
    }

    /// Gate counts by QASM name (synthetic gates included).
    pub fn gate_counts(&self) -> std::collections::BTreeMap<String, usize> {
        let mut m = std::collections::BTreeMap::new();
        for ins in &self.instructions {
            let name = match ins.gate {
                Gate::Swap => "swap".to_string(),
                g => g.gate_type().expect("named").name().to_string(),
            };
            *m.entry(name).or_insert(0) += 1;
        }
        m
    }

    /// Number of two-qubit gates of the given type.
    pub fn count(&self, t: GateType) -> usize {
        self.instructions.iter().filter(|i| i.gate.gate_type() == Some(t)).count()
    }

    /// Distinct gate types of non-synthetic instructions.
    pub fn gate_types(&self) -> Vec<GateType> {
        let mut v: Vec<GateType> = self.instructions.iter().filter(|i| !i.synthetic).filter_map(|i| i.gate.gate_type()).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::linalg_diff::Op;

    #[test]
    fn gate_matrices_are_unitary() {
        for g in [Gate::Sx, Gate::Rz(0.7), Gate::X, Gate::H, Gate::Cx, Gate::Cz, Gate::Swap] {
            let m = g.matrix();
            let n = m.rows();
            let p = ComplexTensor::gemm(&m, Op::H, &m, Op::N).unwrap();
            assert!(p.max_abs_diff(&ComplexTensor::identity(n)) < 1e-15, "{g:?}");
        }
        // SX² = X
        let sx = Gate::Sx.matrix();
        assert!(sx.matmul(&sx).unwrap().max_abs_diff(&Gate::X.matrix()) < 1e-15);
    }

    #[test]
    fn register_orders_by_classical_bit() {
        let mut c = Circuit::new(3, 3);
        c.measure(0, 1);
        c.measure(2, 0);
        c.measure(1, 2);
        assert_eq!(c.register(), vec![(1, 2), (0, 1), (2, 0)]);
    }
}
