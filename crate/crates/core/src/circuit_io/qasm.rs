//! OpenQASM 2 subset: qreg/creg, sx, rz, x, h, cx, cz, measure; barriers are
//! skipped. Several registers are concatenated in declaration order.

use std::collections::HashMap;
use std::fmt::Write;

use super::{Circuit, Gate, Instruction};
use crate::error::{Error, Result};

fn perr(line: usize, msg: impl Into<String>) -> Error {
    Error::Parse { line, msg: msg.into() }
}

struct Registers {
    map: HashMap<String, (usize, usize)>,
    total: usize,
}

impl Registers {
    fn new() -> Self {
        Registers { map: HashMap::new(), total: 0 }
    }

    fn declare(&mut self, name: &str, size: usize, line: usize) -> Result<()> {
        if self.map.insert(name.to_string(), (self.total, size)).is_some() {
            return Err(perr(line, format!("register '{name}' declared twice")));
        }
        self.total += size;
        Ok(())
    }

    /// `r[i]` → one index, `r` → the whole register.
    fn resolve(&self, arg: &str, line: usize) -> Result<Vec<usize>> {
        let arg = arg.trim();
        let (name, idx) = match arg.find('[') {
            Some(p) => {
                let close = arg.strip_suffix(']').ok_or_else(|| perr(line, format!("malformed operand '{arg}'")))?;
                let i: usize = close[p + 1..].trim().parse().map_err(|_| perr(line, format!("bad index in '{arg}'")))?;
                (arg[..p].trim(), Some(i))
            }
            None => (arg, None),
        };
        let &(off, size) = self.map.get(name).ok_or_else(|| perr(line, format!("unknown register '{name}'")))?;
        match idx {
            Some(i) if i < size => Ok(vec![off + i]),
            Some(i) => Err(perr(line, format!("index {i} out of range for '{name}'"))),
            None => Ok((off..off + size).collect()),
        }
    }
}

/// Statements with the line each one starts on; `//` comments removed.
fn statements(text: &str) -> Vec<(usize, String)> {
    let mut out = Vec::new();
    let mut cur = String::new();
    let mut start = 0;
    for (ln, raw) in text.lines().enumerate() {
        let line = raw.split("//").next().unwrap_or("");
        for ch in line.chars() {
            if cur.trim().is_empty() && !ch.is_whitespace() && ch != ';' {
                start = ln + 1;
            }
            if ch == ';' {
                out.push((start, std::mem::take(&mut cur).trim().to_string()));
            } else {
                cur.push(ch);
            }
        }
        cur.push(' ');
    }
    if !cur.trim().is_empty() {
        out.push((start, cur.trim().to_string()));
    }
    out
}

pub fn parse_qasm(text: &str) -> Result<Circuit> {
    let mut qregs = Registers::new();
    let mut cregs = Registers::new();
    let mut instructions = Vec::new();
    let mut measurements = Vec::new();
    let mut measured = std::collections::HashSet::new();
    let mut header = false;
    for (line, st) in statements(text) {
        if st.is_empty() {
            continue;
        }
        let (head, rest) = split_head(&st);
        if !header && head != "OPENQASM" {
            return Err(perr(line, "missing OPENQASM header"));
        }
        match head {
            "OPENQASM" => {
                let v = rest.trim();
                if v != "2.0" && v != "2" {
                    return Err(perr(line, format!("unsupported version '{v}'")));
                }
                header = true;
            }
            "include" => {}
            "qreg" | "creg" => {
                let (name, size) = parse_decl(rest, line)?;
                if head == "qreg" {
                    qregs.declare(&name, size, line)?;
                } else {
                    cregs.declare(&name, size, line)?;
                }
            }
            "barrier" => {}
            "measure" => {
                let (a, b) = rest.split_once("->").ok_or_else(|| perr(line, "measure needs '->'"))?;
                let qs = qregs.resolve(a, line)?;
                let cs = cregs.resolve(b, line)?;
                if qs.len() != cs.len() {
                    return Err(perr(line, "measure operands differ in size"));
                }
                for (q, c) in qs.into_iter().zip(cs) {
                    if measurements.iter().any(|&(_, c2)| c2 == c) {
                        return Err(perr(line, format!("classical bit {c} written twice")));
                    }
                    measured.insert(q);
                    measurements.push((q, c));
                }
            }
            _ => {
                let (name, args) = split_params(&st, line)?;
                let gate = match name.as_str() {
                    "sx" => Gate::Sx,
                    "x" => Gate::X,
                    "h" => Gate::H,
                    "cx" | "CX" => Gate::Cx,
                    "cz" => Gate::Cz,
                    "rz" => {
                        let p = args.0.as_deref().ok_or_else(|| perr(line, "rz needs an angle"))?;
                        Gate::Rz(eval_expr(p, line)?)
                    }
                    other => return Err(perr(line, format!("unsupported gate '{other}'"))),
                };
                if !matches!(gate, Gate::Rz(_)) && args.0.is_some() {
                    return Err(perr(line, format!("gate '{name}' takes no parameters")));
                }
                let operands: Vec<Vec<usize>> =
                    args.1.split(',').map(|a| qregs.resolve(a, line)).collect::<Result<_>>()?;
                if operands.len() != gate.arity() {
                    return Err(perr(line, format!("gate '{name}' expects {} operand(s)", gate.arity())));
                }
                let width = operands.iter().map(Vec::len).max().unwrap_or(1);
                for k in 0..width {
                    let qs: Vec<usize> = operands.iter().map(|o| if o.len() == 1 { o[0] } else { o[k] }).collect();
                    if operands.iter().any(|o| o.len() != 1 && o.len() != width) {
                        return Err(perr(line, "register operands differ in size"));
                    }
                    if qs.len() == 2 && qs[0] == qs[1] {
                        return Err(perr(line, "two-qubit gate on a single qubit"));
                    }
                    if let Some(q) = qs.iter().find(|q| measured.contains(*q)) {
                        return Err(perr(line, format!("gate on qubit {q} after its measurement")));
                    }
                    instructions.push(Instruction::new(gate, &qs));
                }
            }
        }
    }
    if !header {
        return Err(perr(1, "missing OPENQASM header"));
    }
    let c = Circuit {
        num_qubits: qregs.total,
        num_clbits: cregs.total,
        instructions,
        measurements,
        layout: (0..qregs.total).collect(),
    };
    c.validate()?;
    Ok(c)
}

fn split_head(st: &str) -> (&str, &str) {
    let end = st.find(|c: char| c.is_whitespace() || c == '(').unwrap_or(st.len());
    (&st[..end], &st[end..])
}

fn parse_decl(rest: &str, line: usize) -> Result<(String, usize)> {
    let rest = rest.trim();
    let open = rest.find('[').ok_or_else(|| perr(line, "declaration needs a size"))?;
    let inner = rest[open + 1..].strip_suffix(']').ok_or_else(|| perr(line, "unterminated size"))?;
    let size = inner.trim().parse().map_err(|_| perr(line, format!("bad register size '{inner}'")))?;
    let name = rest[..open].trim();
    if name.is_empty() || !name.chars().all(|c| c.is_alphanumeric() || c == '_') {
        return Err(perr(line, format!("bad register name '{name}'")));
    }
    Ok((name.to_string(), size))
}

/// "name(params) operands" → (name, (params, operands)).
fn split_params(st: &str, line: usize) -> Result<(String, (Option<String>, String))> {
    let (name, rest) = split_head(st);
    let rest = rest.trim_start();
    if let Some(r) = rest.strip_prefix('(') {
        let mut depth = 1;
        for (i, c) in r.char_indices() {
            match c {
                '(' => depth += 1,
                ')' => {
                    depth -= 1;
                    if depth == 0 {
                        return Ok((name.to_string(), (Some(r[..i].to_string()), r[i + 1..].trim().to_string())));
                    }
                }
                _ => {}
            }
        }
        return Err(perr(line, "unbalanced parentheses"));
    }
    if rest.is_empty() {
        return Err(perr(line, format!("'{name}' has no operands")));
    }
    Ok((name.to_string(), (None, rest.to_string())))
}

/// Evaluates a real expression over literals, `pi`, + − * / and parentheses.
pub(crate) fn eval_expr(src: &str, line: usize) -> Result<f64> {
    let toks: Vec<char> = src.chars().filter(|c| !c.is_whitespace()).collect();
    let mut p = ExprParser { toks, pos: 0, line };
    let v = p.expr()?;
    if p.pos != p.toks.len() {
        return Err(perr(line, format!("unexpected '{}' in expression", p.toks[p.pos])));
    }
    Ok(v)
}

struct ExprParser {
    toks: Vec<char>,
    pos: usize,
    line: usize,
}

impl ExprParser {
    fn peek(&self) -> Option<char> {
        self.toks.get(self.pos).copied()
    }

    fn expr(&mut self) -> Result<f64> {
        let mut v = self.term()?;
        while let Some(c @ ('+' | '-')) = self.peek() {
            self.pos += 1;
            let r = self.term()?;
            v = if c == '+' { v + r } else { v - r };
        }
        Ok(v)
    }

    fn term(&mut self) -> Result<f64> {
        let mut v = self.unary()?;
        while let Some(c @ ('*' | '/')) = self.peek() {
            self.pos += 1;
            let r = self.unary()?;
            v = if c == '*' { v * r } else { v / r };
        }
        Ok(v)
    }

    fn unary(&mut self) -> Result<f64> {
        match self.peek() {
            Some('-') => {
                self.pos += 1;
                Ok(-self.unary()?)
            }
            Some('+') => {
                self.pos += 1;
                self.unary()
            }
            _ => self.primary(),
        }
    }

    fn primary(&mut self) -> Result<f64> {
        match self.peek() {
            Some('(') => {
                self.pos += 1;
                let v = self.expr()?;
                if self.peek() != Some(')') {
                    return Err(perr(self.line, "missing ')' in expression"));
                }
                self.pos += 1;
                Ok(v)
            }
            Some(c) if c.is_ascii_alphabetic() => {
                let start = self.pos;
                while self.peek().is_some_and(|c| c.is_ascii_alphanumeric()) {
                    self.pos += 1;
                }
                let word: String = self.toks[start..self.pos].iter().collect();
                if word == "pi" {
                    Ok(std::f64::consts::PI)
                } else {
                    Err(perr(self.line, format!("unknown identifier '{word}'")))
                }
            }
            Some(c) if c.is_ascii_digit() || c == '.' => {
                let start = self.pos;
                while let Some(c) = self.peek() {
                    let exp_sign = (c == '+' || c == '-') && matches!(self.toks.get(self.pos - 1), Some('e' | 'E'));
                    if c.is_ascii_digit() || c == '.' || c == 'e' || c == 'E' || exp_sign {
                        self.pos += 1;
                    } else {
                        break;
                    }
                }
                let s: String = self.toks[start..self.pos].iter().collect();
                s.parse().map_err(|_| perr(self.line, format!("bad number '{s}'")))
            }
            Some(c) => Err(perr(self.line, format!("unexpected '{c}' in expression"))),
            None => Err(perr(self.line, "expression ends early")),
        }
    }
}

/// Prints a circuit in the dialect `parse_qasm` reads. SWAPs are written as
/// three CX gates so the output stays inside the supported gate set.
pub fn print_qasm(c: &Circuit) -> String {
    let mut s = String::from("OPENQASM 2.0;\ninclude \"qelib1.inc\";\n");
    let _ = writeln!(s, "qreg q[{}];", c.num_qubits);
    if c.num_clbits > 0 {
        let _ = writeln!(s, "creg c[{}];", c.num_clbits);
    }
    for ins in &c.instructions {
        let ops: Vec<String> = ins.qubits.iter().map(|q| format!("q[{q}]")).collect();
        if ins.gate == super::Gate::Swap {
            let (a, b) = (&ops[0], &ops[1]);
            let _ = writeln!(s, "cx {a},{b};\ncx {b},{a};\ncx {a},{b};");
        } else {
            let _ = writeln!(s, "{} {};", ins.gate.qasm_name(), ops.join(","));
        }
    }
    for &(q, cb) in &c.measurements {
        let _ = writeln!(s, "measure q[{q}] -> c[{cb}];");
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::circuit_io::GateType;

    const HDR: &str = "OPENQASM 2.0;\ninclude \"qelib1.inc\";\n";

    #[test]
    fn minimal_program() {
        let c = parse_qasm(&format!("{HDR}qreg q[1];\ncreg c[1];\nx q[0];\nmeasure q[0]->c[0];\n")).unwrap();
        assert_eq!(c.instructions.len(), 1);
        assert_eq!(c.measurements, vec![(0, 0)]);
    }

    #[test]
    fn angle_expressions() {
        let cases = [("pi/2", std::f64::consts::FRAC_PI_2), ("-pi", -std::f64::consts::PI), ("2*(pi-1)/4", (std::f64::consts::PI - 1.0) / 2.0), ("1.5e-1", 0.15), ("-(-3)", 3.0)];
        for (e, v) in cases {
            let c = parse_qasm(&format!("{HDR}qreg q[1];\nrz({e}) q[0];\n")).unwrap();
            match c.instructions[0].gate {
                Gate::Rz(t) => assert!((t - v).abs() < 1e-15, "{e}"),
                g => panic!("{g:?}"),
            }
        }
    }

    #[test]
    fn errors_carry_location() {
        let e = parse_qasm(&format!("{HDR}qreg q[2];\n\nu3(0,0,0) q[0];\n")).unwrap_err();
        match e {
            Error::Parse { line, msg } => {
                assert_eq!(line, 5);
                assert!(msg.contains("u3"));
            }
            e => panic!("{e:?}"),
        }
        assert!(matches!(parse_qasm(&format!("{HDR}qreg q[2];\ncx q[0];\n")), Err(Error::Parse { line: 4, .. })));
        assert!(parse_qasm(&format!("{HDR}qreg q[2];\nrz(pi/) q[0];\n")).is_err());
        assert!(parse_qasm(&format!("{HDR}qreg q[2];\nx q[5];\n")).is_err());
        assert!(parse_qasm("qreg q[1];\n").is_err());
        let late = format!("{HDR}qreg q[1];\ncreg c[1];\nmeasure q[0]->c[0];\nx q[0];\n");
        assert!(parse_qasm(&late).is_err());
    }

    #[test]
    fn broadcast_comments_and_barriers() {
        let src = format!("{HDR}// comment\nqreg q[3]; creg c[3];\nh q; barrier q;\ncx q[0],q[1]; // trailing\nmeasure q -> c;\n");
        let c = parse_qasm(&src).unwrap();
        assert_eq!(c.instructions.len(), 4);
        assert_eq!(c.measurements.len(), 3);
        assert_eq!(c.count(GateType::H), 3);
    }

    #[test]
    fn print_parse_fixpoint() {
        let src = format!("{HDR}qreg q[3];\ncreg c[2];\nsx q[0];\nrz(0.1+pi) q[1];\ncz q[1],q[2];\ncx q[2],q[0];\nh q[2];\nmeasure q[2]->c[0];\nmeasure q[0]->c[1];\n");
        let a = parse_qasm(&src).unwrap();
        let b = parse_qasm(&print_qasm(&a)).unwrap();
        assert_eq!(a, b);
        assert_eq!(print_qasm(&a), print_qasm(&b));
    }
}
