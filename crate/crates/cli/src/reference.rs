//! Ground-truth channel specs such as `bitflip:0.001,depol2q:0.001`.

use noisefit::circuit_io::GateType;
use noisefit::oracle_sim::{injection_resolver, Resolver};
use noisefit::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ReferenceSpec {
    /// Bit-flip probability after every one-qubit gate.
    pub bitflip: f64,
    /// Two-qubit depolarizing probability after every two-qubit gate.
    pub depol2q: f64,
}

impl std::str::FromStr for ReferenceSpec {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let mut spec = ReferenceSpec { bitflip: 0.0, depol2q: 0.0 };
        for part in s.split(',').map(str::trim).filter(|p| !p.is_empty()) {
            let (name, value) =
                part.split_once(':').ok_or_else(|| Error::Format(format!("expected name:probability, got '{part}'")))?;
            let p: f64 = value.trim().parse().map_err(|_| Error::Format(format!("bad probability '{value}'")))?;
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
            }
            match name.trim() {
                "bitflip" => spec.bitflip = p,
                "depol2q" => spec.depol2q = p,
                other => return Err(Error::Format(format!("unknown channel '{other}' (known: bitflip, depol2q)"))),
            }
        }
        Ok(spec)
    }
}

impl ReferenceSpec {
    /// Explicit channels for every key of the gate types; prep, measurement
    /// and crosstalk stay noiseless.
    pub fn resolver(&self, gate_types: &[GateType]) -> Result<Resolver> {
        injection_resolver(gate_types, self.bitflip, self.depol2q)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_specs() {
        let s: ReferenceSpec = "bitflip:0.001,depol2q:0.002".parse().unwrap();
        assert_eq!(s, ReferenceSpec { bitflip: 0.001, depol2q: 0.002 });
        let s: ReferenceSpec = "depol2q:0.01".parse().unwrap();
        assert_eq!(s.bitflip, 0.0);
        assert!("bitflip".parse::<ReferenceSpec>().is_err());
        assert!("ampdamp:0.1".parse::<ReferenceSpec>().is_err());
        assert!("bitflip:1.5".parse::<ReferenceSpec>().is_err());
    }
}
