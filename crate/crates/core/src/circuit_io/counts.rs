use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// How bitstrings in a counts file map to classical bits.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum BitOrder {
    /// Leftmost character is the highest classical bit (the common hardware
    /// convention and the internal one).
    #[default]
    MsbFirst,
    /// Leftmost character is classical bit 0; reversed on ingestion.
    LsbFirst,
}

/// Shot counts per measured bitstring.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CountsDistribution {
    num_bits: usize,
    counts: BTreeMap<String, u64>,
    total_shots: u64,
}

#[derive(Serialize, Deserialize)]
struct CountsFile {
    bits: usize,
    shots: u64,
    counts: BTreeMap<String, u64>,
}

impl CountsDistribution {
    pub fn new(num_bits: usize, counts: BTreeMap<String, u64>) -> Result<Self> {
        for (k, &v) in &counts {
            if k.len() != num_bits || !k.bytes().all(|b| b == b'0' || b == b'1') {
                return Err(Error::Format(format!("bitstring '{k}' is not {num_bits} binary digits")));
            }
            if v == 0 {
                return Err(Error::Format(format!("bitstring '{k}' has a zero count")));
            }
        }
        if counts.is_empty() {
            return Err(Error::Format("counts are empty".into()));
        }
        let total_shots = counts.values().sum();
        Ok(CountsDistribution { num_bits, counts, total_shots })
    }

    /// From a dense count vector indexed by outcome (index bit k−1 is the
    /// leftmost character); zero entries are dropped.
    pub fn from_dense(num_bits: usize, dense: &[u64]) -> Result<Self> {
        let counts = dense
            .iter()
            .enumerate()
            .filter(|(_, &c)| c > 0)
            .map(|(i, &c)| (bitstring(i, num_bits), c))
            .collect();
        Self::new(num_bits, counts)
    }

    pub fn num_bits(&self) -> usize {
        self.num_bits
    }

    pub fn total_shots(&self) -> u64 {
        self.total_shots
    }

    pub fn counts(&self) -> &BTreeMap<String, u64> {
        &self.counts
    }

    pub fn len(&self) -> usize {
        self.counts.len()
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// (outcome index, empirical frequency) in ascending index order.
    pub fn frequencies(&self) -> Vec<(usize, f64)> {
        let n = self.total_shots as f64;
        self.counts.iter().map(|(k, &v)| (index_of(k), v as f64 / n)).collect()
    }

    /// Dense frequency vector over all 2^bits outcomes.
    pub fn dense_frequencies(&self) -> Result<Vec<f64>> {
        if self.num_bits > 24 {
            return Err(Error::Resource(format!("{} bits is too wide for a dense vector", self.num_bits)));
        }
        let mut v = vec![0.0; 1 << self.num_bits];
        for (i, f) in self.frequencies() {
            v[i] = f;
        }
        Ok(v)
    }

    /// Reverses every bitstring.
    pub fn reversed(&self) -> Self {
        let counts = self.counts.iter().map(|(k, &v)| (k.chars().rev().collect(), v)).collect();
        CountsDistribution { num_bits: self.num_bits, counts, total_shots: self.total_shots }
    }

    pub fn from_json(text: &str, order: BitOrder) -> Result<Self> {
        let f: CountsFile = serde_json::from_str(text).map_err(|e| Error::Format(format!("counts file: {e}")))?;
        let c = Self::new(f.bits, f.counts)?;
        if c.total_shots != f.shots {
            return Err(Error::Format(format!("counts sum to {} but shots = {}", c.total_shots, f.shots)));
        }
        Ok(match order {
            BitOrder::MsbFirst => c,
            BitOrder::LsbFirst => c.reversed(),
        })
    }

    pub fn to_json(&self) -> String {
        let f = CountsFile { bits: self.num_bits, shots: self.total_shots, counts: self.counts.clone() };
        serde_json::to_string_pretty(&f).expect("serializable")
    }
}

/// Outcome index of a bitstring; the leftmost character is the most significant.
pub fn index_of(bits: &str) -> usize {
    bits.bytes().fold(0, |acc, b| (acc << 1) | usize::from(b == b'1'))
}

pub fn bitstring(index: usize, width: usize) -> String {
    (0..width).rev().map(|k| if index >> k & 1 == 1 { '1' } else { '0' }).collect()
}

pub fn load_counts(path: &Path, order: BitOrder) -> Result<CountsDistribution> {
    CountsDistribution::from_json(&std::fs::read_to_string(path)?, order)
}

pub fn save_counts(counts: &CountsDistribution, path: &Path) -> Result<()> {
    std::fs::write(path, counts.to_json())?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn single_outcome_file() {
        let c = CountsDistribution::from_json(r#"{"bits": 5, "shots": 16384, "counts": {"10000": 16384}}"#, BitOrder::MsbFirst).unwrap();
        assert_eq!(c.total_shots(), 16384);
        assert_eq!(c.frequencies(), vec![(16, 1.0)]);
        let r = CountsDistribution::from_json(r#"{"bits": 5, "shots": 16384, "counts": {"10000": 16384}}"#, BitOrder::LsbFirst).unwrap();
        assert_eq!(r.frequencies(), vec![(1, 1.0)]);
    }

    #[test]
    fn inconsistent_files_are_rejected() {
        let bad = [
            r#"{"bits": 2, "shots": 5, "counts": {"01": 4}}"#,
            r#"{"bits": 2, "shots": 4, "counts": {"011": 4}}"#,
            r#"{"bits": 2, "shots": 4, "counts": {"0a": 4}}"#,
            r#"{"bits": 2, "shots": 0, "counts": {"01": 0}}"#,
            r#"{"bits": 2, "counts": {"01": 4}}"#,
        ];
        for b in bad {
            assert!(matches!(CountsDistribution::from_json(b, BitOrder::MsbFirst), Err(Error::Format(_))), "{b}");
        }
    }

    #[test]
    fn save_load_round_trip() {
        let dense: Vec<u64> = (0..32).map(|i| i * 7 + 1).collect();
        let c = CountsDistribution::from_dense(5, &dense).unwrap();
        assert_eq!(c.len(), 32);
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        save_counts(&c, &p).unwrap();
        assert_eq!(load_counts(&p, BitOrder::MsbFirst).unwrap(), c);
        assert_eq!(index_of(&bitstring(19, 5)), 19);
    }
}
