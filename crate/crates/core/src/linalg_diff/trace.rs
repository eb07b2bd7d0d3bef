use super::ops::{self, Forward, Primitive};
use super::tensor::{ComplexTensor, C64};
use crate::error::{Error, Result};

/// Execution backend for the forward model. `Eager` evaluates and forgets;
/// `Trace` records every primitive for a reverse pass.
pub trait Backend {
    type T: Clone;

    fn constant(&mut self, t: ComplexTensor) -> Self::T;
    fn value<'a>(&'a self, x: &'a Self::T) -> &'a ComplexTensor;
    fn apply(&mut self, op: Box<dyn Primitive>, inputs: &[&Self::T]) -> Result<Vec<Self::T>>;

    fn apply1(&mut self, op: Box<dyn Primitive>, inputs: &[&Self::T]) -> Result<Self::T> {
        Ok(self.apply(op, inputs)?.swap_remove(0))
    }
    fn apply2(&mut self, op: Box<dyn Primitive>, inputs: &[&Self::T]) -> Result<(Self::T, Self::T)> {
        let mut v = self.apply(op, inputs)?;
        let b = v.pop().expect("two outputs");
        let a = v.pop().expect("two outputs");
        Ok((a, b))
    }
    fn shape(&self, x: &Self::T) -> Vec<usize> {
        self.value(x).shape().to_vec()
    }

    fn reshape(&mut self, x: &Self::T, shape: &[usize]) -> Result<Self::T> {
        if self.value(x).shape() == shape {
            return Ok(x.clone());
        }
        self.apply1(Box::new(ops::Reshape(shape.to_vec())), &[x])
    }
    fn permute(&mut self, x: &Self::T, perm: &[usize]) -> Result<Self::T> {
        if perm.iter().enumerate().all(|(i, &p)| i == p) {
            return Ok(x.clone());
        }
        self.apply1(Box::new(ops::Permute(perm.to_vec())), &[x])
    }
    fn slice(&mut self, x: &Self::T, axis: usize, start: usize, len: usize) -> Result<Self::T> {
        self.apply1(Box::new(ops::Slice { axis, start, len }), &[x])
    }
    fn concat(&mut self, parts: &[&Self::T], axis: usize) -> Result<Self::T> {
        self.apply1(Box::new(ops::Concat(axis)), parts)
    }
    fn matmul(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::MatMul), &[a, b])
    }
    fn conj(&mut self, x: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::Conj), &[x])
    }
    fn adjoint(&mut self, x: &Self::T) -> Result<Self::T> {
        let t = self.permute(x, &[1, 0])?;
        self.conj(&t)
    }
    fn add(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::Add), &[a, b])
    }
    fn hadamard(&mut self, a: &Self::T, b: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::Hadamard), &[a, b])
    }
    fn scale(&mut self, x: &Self::T, z: C64) -> Result<Self::T> {
        self.apply1(Box::new(ops::Scale(z)), &[x])
    }
    fn real(&mut self, x: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::RealPart), &[x])
    }
    fn sum(&mut self, x: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::SumAll), &[x])
    }
    fn log_real(&mut self, x: &Self::T, floor: f64) -> Result<Self::T> {
        self.apply1(Box::new(ops::LogReal(floor)), &[x])
    }
    fn sqrt_real(&mut self, x: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::SqrtReal), &[x])
    }
    fn div_scalar(&mut self, x: &Self::T, s: &Self::T) -> Result<Self::T> {
        self.apply1(Box::new(ops::DivScalar), &[x, s])
    }
    fn gather(&mut self, x: &Self::T, idx: Vec<usize>) -> Result<Self::T> {
        self.apply1(Box::new(ops::Gather(idx)), &[x])
    }
    fn hermitian_from_params(&mut self, theta: &Self::T, n: usize) -> Result<Self::T> {
        self.apply1(Box::new(ops::HermitianFromParams(n)), &[theta])
    }
    fn matrix_exp(&mut self, h: &Self::T) -> Result<Self::T> {
        let s = self.shape(h);
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape(format!("matrix_exp needs a square matrix, got {:?}", s)));
        }
        self.apply1(Box::new(ops::ExpIHermitian), &[h])
    }
    /// (U, S, V†) of the rank-limited SVD.
    fn truncated_svd(&mut self, m: &Self::T, rank: usize) -> Result<(Self::T, Self::T, Self::T)> {
        let mut v = self.apply(Box::new(ops::TruncatedSvd(rank)), &[m])?;
        let vh = v.pop().expect("three outputs");
        let s = v.pop().expect("three outputs");
        let u = v.pop().expect("three outputs");
        Ok((u, s, vh))
    }
    fn trunc_split(&mut self, m: &Self::T, rank: usize) -> Result<(Self::T, Self::T)> {
        self.apply2(Box::new(ops::TruncSplit(rank)), &[m])
    }
    fn trunc_split_product(&mut self, a: &Self::T, b: &Self::T, rank: usize) -> Result<(Self::T, Self::T)> {
        self.apply2(Box::new(ops::TruncSplitProduct(rank)), &[a, b])
    }

    /// Contracts `a_axes` of `a` with `b_axes` of `b`. Result axes are the free
    /// axes of `a` followed by the free axes of `b`, each in original order.
    fn contract(&mut self, a: &Self::T, b: &Self::T, a_axes: &[usize], b_axes: &[usize]) -> Result<Self::T> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if a_axes.len() != b_axes.len()
            || a_axes.iter().zip(b_axes).any(|(&i, &j)| i >= sa.len() || j >= sb.len() || sa[i] != sb[j])
        {
            return Err(Error::Shape(format!(
                "contract {:?}{:?} with {:?}{:?}",
                sa, a_axes, sb, b_axes
            )));
        }
        let free_a: Vec<usize> = (0..sa.len()).filter(|i| !a_axes.contains(i)).collect();
        let free_b: Vec<usize> = (0..sb.len()).filter(|i| !b_axes.contains(i)).collect();
        let pa: Vec<usize> = free_a.iter().chain(a_axes).copied().collect();
        let pb: Vec<usize> = b_axes.iter().chain(&free_b).copied().collect();
        let m: usize = free_a.iter().map(|&i| sa[i]).product();
        let k: usize = a_axes.iter().map(|&i| sa[i]).product();
        let n: usize = free_b.iter().map(|&i| sb[i]).product();
        let at = self.permute(a, &pa)?;
        let at = self.reshape(&at, &[m, k])?;
        let bt = self.permute(b, &pb)?;
        let bt = self.reshape(&bt, &[k, n])?;
        let c = self.matmul(&at, &bt)?;
        let out: Vec<usize> = free_a.iter().map(|&i| sa[i]).chain(free_b.iter().map(|&i| sb[i])).collect();
        self.reshape(&c, &out)
    }
}

/// Immediate evaluation; intermediates are dropped as soon as unused.
#[derive(Default)]
pub struct Eager {
    ops: usize,
}

impl Eager {
    pub fn new() -> Self {
        Self::default()
    }
}

impl Backend for Eager {
    type T = ComplexTensor;

    fn constant(&mut self, t: ComplexTensor) -> ComplexTensor {
        t
    }
    fn value<'a>(&'a self, x: &'a ComplexTensor) -> &'a ComplexTensor {
        x
    }
    fn apply(&mut self, op: Box<dyn Primitive>, inputs: &[&ComplexTensor]) -> Result<Vec<ComplexTensor>> {
        let f = op.forward(inputs)?;
        self.ops += 1;
        if f.outputs.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: op.name(), node: self.ops - 1 });
        }
        Ok(f.outputs)
    }
}

/// Handle to one output of a recorded node.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    node: usize,
    out: usize,
}

enum NodeKind {
    Param,
    Constant,
    Op { op: Box<dyn Primitive>, inputs: Vec<Var>, fwd: Forward },
}

struct Node {
    kind: NodeKind,
    /// Leaf values live here; op outputs live in `fwd.outputs`.
    leaf: Option<ComplexTensor>,
    needs_grad: bool,
}

/// Evaluation trace supporting a reverse accumulation pass.
#[derive(Default)]
pub struct Trace {
    nodes: Vec<Node>,
    params: Vec<Var>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a differentiable real parameter vector.
    pub fn param(&mut self, values: &[f64]) -> Var {
        let t = ComplexTensor::from_real(values, &[values.len()]).expect("vector shape");
        self.param_tensor(t)
    }

    pub fn param_tensor(&mut self, t: ComplexTensor) -> Var {
        self.nodes.push(Node { kind: NodeKind::Param, leaf: Some(t), needs_grad: true });
        let v = Var { node: self.nodes.len() - 1, out: 0 };
        self.params.push(v);
        v
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn output(&self, v: Var) -> &ComplexTensor {
        let n = &self.nodes[v.node];
        match &n.kind {
            NodeKind::Op { fwd, .. } => &fwd.outputs[v.out],
            _ => n.leaf.as_ref().expect("leaf value"),
        }
    }

    /// Reverse pass from a scalar `loss`; returns ∂loss/∂θ per parameter
    /// (in registration order).
    pub fn backward(&self, loss: Var) -> Result<Vec<Vec<f64>>> {
        Ok(self
            .backward_complex(loss)?
            .into_iter()
            .map(|g| g.data().iter().map(|z| z.re).collect())
            .collect())
    }

    /// Complex adjoints ∂L/∂Re z + i ∂L/∂Im z of every parameter leaf.
    pub fn backward_complex(&self, loss: Var) -> Result<Vec<ComplexTensor>> {
        let lv = self.output(loss);
        if lv.len() != 1 {
            return Err(Error::Shape(format!("loss must be scalar, got {:?}", lv.shape())));
        }
        let mut adj: Vec<Option<Vec<Option<ComplexTensor>>>> = (0..self.nodes.len()).map(|_| None).collect();
        let seed = ComplexTensor::new(vec![C64::new(1.0, 0.0)], lv.shape().to_vec())?;
        accumulate(&mut adj, loss, seed, self)?;
        // Nodes are appended in execution order, so descending index is a
        // reverse topological order.
        for idx in (0..=loss.node).rev() {
            let node = &self.nodes[idx];
            let NodeKind::Op { op, inputs, fwd } = &node.kind else { continue };
            if !node.needs_grad {
                continue;
            }
            let Some(grads) = adj[idx].take() else { continue };
            if grads.iter().all(Option::is_none) {
                continue;
            }
            let grefs: Vec<Option<&ComplexTensor>> = grads.iter().map(Option::as_ref).collect();
            let ins: Vec<&ComplexTensor> = inputs.iter().map(|&v| self.output(v)).collect();
            let gin = op.backward(&ins, fwd, &grefs)?;
            for (v, g) in inputs.iter().zip(gin) {
                let Some(g) = g else { continue };
                if !self.nodes[v.node].needs_grad {
                    continue;
                }
                if !g.is_finite() {
                    return Err(Error::NonFinite { op: op.name(), node: idx });
                }
                accumulate(&mut adj, *v, g, self)?;
            }
        }
        Ok(self
            .params
            .iter()
            .map(|p| match adj[p.node].as_mut().and_then(|a| a[0].take()) {
                Some(g) => g,
                None => ComplexTensor::zeros(self.output(*p).shape()),
            })
            .collect())
    }

    /// Re-executes every op from the recorded leaves and reports whether all
    /// outputs are reproduced bit for bit.
    pub fn replay(&self) -> Result<bool> {
        let mut values: Vec<Vec<ComplexTensor>> = Vec::with_capacity(self.nodes.len());
        for node in &self.nodes {
            match &node.kind {
                NodeKind::Op { op, inputs, fwd } => {
                    let ins: Vec<&ComplexTensor> = inputs.iter().map(|v| &values[v.node][v.out]).collect();
                    let f = op.forward(&ins)?;
                    let same = f.outputs.len() == fwd.outputs.len()
                        && f.outputs.iter().zip(&fwd.outputs).all(|(a, b)| bit_equal(a, b));
                    if !same {
                        return Ok(false);
                    }
                    values.push(f.outputs);
                }
                _ => values.push(vec![node.leaf.clone().expect("leaf value")]),
            }
        }
        Ok(true)
    }
}

fn bit_equal(a: &ComplexTensor, b: &ComplexTensor) -> bool {
    a.shape() == b.shape()
        && a.data().iter().zip(b.data()).all(|(x, y)| {
            x.re.to_bits() == y.re.to_bits() && x.im.to_bits() == y.im.to_bits()
        })
}

fn accumulate(adj: &mut [Option<Vec<Option<ComplexTensor>>>], v: Var, g: ComplexTensor, tr: &Trace) -> Result<()> {
    let n_out = match &tr.nodes[v.node].kind {
        NodeKind::Op { fwd, .. } => fwd.outputs.len(),
        _ => 1,
    };
    let slot = adj[v.node].get_or_insert_with(|| vec![None; n_out]);
    match &mut slot[v.out] {
        Some(acc) => acc.add_assign(&g)?,
        s @ None => *s = Some(g),
    }
    Ok(())
}

impl Backend for Trace {
    type T = Var;

    fn constant(&mut self, t: ComplexTensor) -> Var {
        self.nodes.push(Node { kind: NodeKind::Constant, leaf: Some(t), needs_grad: false });
        Var { node: self.nodes.len() - 1, out: 0 }
    }

    fn value<'a>(&'a self, x: &'a Var) -> &'a ComplexTensor {
        self.output(*x)
    }

    fn apply(&mut self, op: Box<dyn Primitive>, inputs: &[&Var]) -> Result<Vec<Var>> {
        let ins: Vec<&ComplexTensor> = inputs.iter().map(|v| self.output(**v)).collect();
        let fwd = op.forward(&ins)?;
        let idx = self.nodes.len();
        if fwd.outputs.iter().any(|t| !t.is_finite()) {
            return Err(Error::NonFinite { op: op.name(), node: idx });
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.node].needs_grad);
        let n_out = fwd.outputs.len();
        // Saved state is only needed for the reverse pass.
        let fwd = if needs_grad { fwd } else { Forward { outputs: fwd.outputs, saved: None } };
        let inputs = inputs.iter().map(|v| **v).collect();
        self.nodes.push(Node { kind: NodeKind::Op { op, inputs, fwd }, leaf: None, needs_grad });
        Ok((0..n_out).map(|out| Var { node: idx, out }).collect())
    }
}

/// Evaluates `f` on a fresh trace and returns (loss, ∂loss/∂params).
pub fn gradient<F>(params: &[Vec<f64>], f: F) -> Result<(f64, Vec<Vec<f64>>)>
where
    F: FnOnce(&mut Trace, &[Var]) -> Result<Var>,
{
    let mut tr = Trace::new();
    let vars: Vec<Var> = params.iter().map(|p| tr.param(p)).collect();
    let loss = f(&mut tr, &vars)?;
    let value = tr.value(&loss).scalar_value().re;
    if !value.is_finite() {
        return Err(Error::NonFinite { op: "loss", node: loss.node });
    }
    let grads = tr.backward(loss)?;
    Ok((value, grads))
}
