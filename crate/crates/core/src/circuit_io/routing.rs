use std::collections::VecDeque;

use super::{Circuit, Gate, Instruction};
use crate::error::{Error, Result};

fn check_ordering(c: &Circuit, ordering: &[usize]) -> Result<Vec<usize>> {
    let n = c.num_qubits;
    let mut pos = vec![usize::MAX; n];
    if ordering.len() != n {
        return Err(Error::Mapping(format!("ordering has {} entries for {n} qubits", ordering.len())));
    }
    for (p, &q) in ordering.iter().enumerate() {
        if q >= n || pos[q] != usize::MAX {
            return Err(Error::Mapping(format!("ordering {ordering:?} is not a permutation")));
        }
        pos[q] = p;
    }
    Ok(pos)
}

/// Places circuit qubit `ordering[p]` at chain position p. A two-qubit gate
/// between distant positions becomes synthetic SWAPs that bring the farther
/// qubit next to the nearer one, the gate, and the SWAPs undone.
pub fn route_to_chain(c: &Circuit, ordering: &[usize]) -> Result<Circuit> {
    c.validate()?;
    let pos = check_ordering(c, ordering)?;
    let mut out = Circuit::new(c.num_qubits, c.num_clbits);
    out.layout = ordering.iter().map(|&q| c.layout[q]).collect();
    for ins in &c.instructions {
        if ins.qubits.len() == 1 {
            out.instructions.push(Instruction { gate: ins.gate, qubits: vec![pos[ins.qubits[0]]], synthetic: ins.synthetic });
            continue;
        }
        let (a, b) = (pos[ins.qubits[0]], pos[ins.qubits[1]]);
        let (lo, hi) = (a.min(b), a.max(b));
        let swaps: Vec<[usize; 2]> = (lo + 2..=hi).rev().map(|p| [p - 1, p]).collect();
        for s in &swaps {
            out.push_synthetic(Gate::Swap, s);
        }
        let qubits = if a == lo { vec![lo, lo + 1] } else { vec![lo + 1, lo] };
        out.instructions.push(Instruction { gate: ins.gate, qubits, synthetic: ins.synthetic });
        for s in swaps.iter().rev() {
            out.push_synthetic(Gate::Swap, s);
        }
    }
    out.measurements = c.measurements.iter().map(|&(q, cb)| (pos[q], cb)).collect();
    Ok(out)
}

/// SWAPs `route_to_chain` would insert for this ordering.
pub fn swap_count(c: &Circuit, ordering: &[usize]) -> Result<usize> {
    let pos = check_ordering(c, ordering)?;
    Ok(c
        .instructions
        .iter()
        .filter(|i| i.qubits.len() == 2)
        .map(|i| 2 * pos[i.qubits[0]].abs_diff(pos[i.qubits[1]]).saturating_sub(1))
        .sum())
}

/// The cheapest of identity, Cuthill–McKee and reverse Cuthill–McKee orderings
/// of the two-qubit interaction graph, by SWAP count. Ties keep the earlier.
pub fn greedy_ordering(c: &Circuit) -> Result<Vec<usize>> {
    let n = c.num_qubits;
    let mut adj = vec![Vec::new(); n];
    for i in c.instructions.iter().filter(|i| i.qubits.len() == 2) {
        let (a, b) = (i.qubits[0], i.qubits[1]);
        if !adj[a].contains(&b) {
            adj[a].push(b);
            adj[b].push(a);
        }
    }
    let deg: Vec<usize> = adj.iter().map(Vec::len).collect();
    let mut cm = Vec::with_capacity(n);
    let mut seen = vec![false; n];
    while cm.len() < n {
        let start = (0..n).filter(|&q| !seen[q]).min_by_key(|&q| (deg[q], q)).expect("unvisited qubit");
        let mut queue = VecDeque::from([start]);
        seen[start] = true;
        while let Some(q) = queue.pop_front() {
            cm.push(q);
            let mut next: Vec<usize> = adj[q].iter().copied().filter(|&v| !seen[v]).collect();
            next.sort_by_key(|&v| (deg[v], v));
            for v in next {
                seen[v] = true;
                queue.push_back(v);
            }
        }
    }
    let rcm: Vec<usize> = cm.iter().rev().copied().collect();
    let mut best: Vec<usize> = (0..n).collect();
    let mut best_cost = swap_count(c, &best)?;
    for cand in [cm, rcm] {
        let cost = swap_count(c, &cand)?;
        if cost < best_cost {
            best_cost = cost;
            best = cand;
        }
    }
    Ok(best)
}

/// Drops idle qubits, then routes onto a chain with [`greedy_ordering`].
pub fn to_chain(c: &Circuit) -> Result<Circuit> {
    let c = compact_idle(c);
    route_to_chain(&c, &greedy_ordering(&c)?)
}

/// Drops qubits that no gate touches and no measurement reads. The layout keeps
/// the original labels of the survivors.
pub fn compact_idle(c: &Circuit) -> Circuit {
    let mut active = vec![false; c.num_qubits];
    for q in c.instructions.iter().flat_map(|i| i.qubits.iter()).chain(c.measurements.iter().map(|m| &m.0)) {
        active[*q] = true;
    }
    let mut map = vec![usize::MAX; c.num_qubits];
    let mut layout = Vec::new();
    for q in 0..c.num_qubits {
        if active[q] {
            map[q] = layout.len();
            layout.push(c.layout[q]);
        }
    }
    Circuit {
        num_qubits: layout.len(),
        num_clbits: c.num_clbits,
        instructions: c
            .instructions
            .iter()
            .map(|i| Instruction { gate: i.gate, qubits: i.qubits.iter().map(|&q| map[q]).collect(), synthetic: i.synthetic })
            .collect(),
        measurements: c.measurements.iter().map(|&(q, cb)| (map[q], cb)).collect(),
        layout,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn adjacent_gates_are_untouched() {
        let mut c = Circuit::new(3, 0);
        c.push(Gate::Cz, &[0, 1]);
        c.push(Gate::Cx, &[2, 1]);
        assert_eq!(route_to_chain(&c, &[0, 1, 2]).unwrap(), c);
    }

    #[test]
    fn distant_gate_gets_swaps() {
        let mut c = Circuit::new(3, 0);
        c.push(Gate::Cz, &[0, 2]);
        let r = route_to_chain(&c, &[0, 1, 2]).unwrap();
        let got: Vec<(Gate, Vec<usize>, bool)> = r.instructions.iter().map(|i| (i.gate, i.qubits.clone(), i.synthetic)).collect();
        assert_eq!(
            got,
            vec![(Gate::Swap, vec![1, 2], true), (Gate::Cz, vec![0, 1], false), (Gate::Swap, vec![1, 2], true)]
        );
        assert_eq!(swap_count(&c, &[0, 1, 2]).unwrap(), 2);
    }

    #[test]
    fn ordering_relabels_and_checks() {
        let mut c = Circuit::new(3, 3);
        c.push(Gate::X, &[0]);
        c.measure(0, 0);
        let r = route_to_chain(&c, &[2, 0, 1]).unwrap();
        assert_eq!(r.instructions[0].qubits, vec![1]);
        assert_eq!(r.measurements, vec![(1, 0)]);
        assert_eq!(r.layout, vec![2, 0, 1]);
        assert!(route_to_chain(&c, &[0, 0, 1]).is_err());
    }

    #[test]
    fn greedy_beats_identity_on_a_star() {
        let mut c = Circuit::new(5, 0);
        for t in [1, 2, 3, 4] {
            c.push(Gate::Cz, &[0, t]);
        }
        let g = greedy_ordering(&c).unwrap();
        assert!(swap_count(&c, &g).unwrap() <= swap_count(&c, &[0, 1, 2, 3, 4]).unwrap());
        let mut line = Circuit::new(4, 0);
        line.push(Gate::Cz, &[0, 3]);
        line.push(Gate::Cz, &[3, 1]);
        line.push(Gate::Cz, &[1, 2]);
        let g = greedy_ordering(&line).unwrap();
        assert_eq!(swap_count(&line, &g).unwrap(), 0);
    }

    #[test]
    fn idle_qubits_are_dropped() {
        let mut c = Circuit::new(5, 2);
        c.push(Gate::Cz, &[1, 3]);
        c.measure(3, 0);
        let k = compact_idle(&c);
        assert_eq!(k.num_qubits, 2);
        assert_eq!(k.layout, vec![1, 3]);
        assert_eq!(k.instructions[0].qubits, vec![0, 1]);
        assert_eq!(k.measurements, vec![(1, 0)]);
    }
}
