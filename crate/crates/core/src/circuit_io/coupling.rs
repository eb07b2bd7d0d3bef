use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Undirected device connectivity over qubits 0..num_qubits.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CouplingMap {
    num_qubits: usize,
    /// Normalized (low, high), sorted, deduplicated.
    edges: Vec<(usize, usize)>,
}

#[derive(Serialize, Deserialize)]
struct CouplingFile {
    edges: Vec<[usize; 2]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    num_qubits: Option<usize>,
}

impl CouplingMap {
    /// Qubits not named by any edge count as present only when below `num_qubits`;
    /// by default that is one past the largest edge endpoint.
    pub fn new(edges: &[(usize, usize)], num_qubits: Option<usize>) -> Result<Self> {
        let mut norm: Vec<(usize, usize)> = Vec::with_capacity(edges.len());
        for &(a, b) in edges {
            if a == b {
                return Err(Error::Mapping(format!("self-loop on qubit {a}")));
            }
            norm.push((a.min(b), a.max(b)));
        }
        norm.sort_unstable();
        norm.dedup();
        let span = norm.iter().map(|e| e.1 + 1).max().unwrap_or(0);
        let n = num_qubits.unwrap_or(span);
        if n < span {
            return Err(Error::Mapping(format!("edge endpoint {} beyond num_qubits {n}", span - 1)));
        }
        Ok(CouplingMap { num_qubits: n, edges: norm })
    }

    /// Chain 0-1-…-(n−1).
    pub fn linear(n: usize) -> Self {
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (i - 1, i)).collect();
        CouplingMap { num_qubits: n, edges }
    }

    pub fn num_qubits(&self) -> usize {
        self.num_qubits
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn contains(&self, q: usize) -> bool {
        q < self.num_qubits
    }

    pub fn neighbors(&self, q: usize) -> BTreeSet<usize> {
        self.edges
            .iter()
            .filter_map(|&(a, b)| if a == q { Some(b) } else if b == q { Some(a) } else { None })
            .collect()
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: CouplingFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("coupling map: {e}")))?;
        let edges: Vec<(usize, usize)> = f.edges.iter().map(|e| (e[0], e[1])).collect();
        Self::new(&edges, f.num_qubits)
    }

    pub fn to_json(&self) -> String {
        let f = CouplingFile { edges: self.edges.iter().map(|&(a, b)| [a, b]).collect(), num_qubits: Some(self.num_qubits) };
        serde_json::to_string(&f).expect("serializable")
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }
}

/// Coupling-map neighbors of the gate qubits, excluding the gate qubits.
pub fn crosstalk_neighbors(map: &CouplingMap, gate_qubits: &[usize]) -> Result<BTreeSet<usize>> {
    if gate_qubits.is_empty() {
        return Err(Error::Mapping("crosstalk query with no gate qubits".into()));
    }
    let mut out = BTreeSet::new();
    for &q in gate_qubits {
        if !map.contains(q) {
            return Err(Error::Mapping(format!("qubit {q} is not in the coupling map")));
        }
        out.extend(map.neighbors(q));
    }
    for q in gate_qubits {
        out.remove(q);
    }
    Ok(out)
}
