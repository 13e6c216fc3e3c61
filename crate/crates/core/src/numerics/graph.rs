//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in insertion order; since inputs
//! always exist before the node that consumes them, insertion order is a
//! topological order and [`Graph::backward`] simply walks the tape in
//! reverse. Tensors are at most two-dimensional and row-major.

use super::paramstore::ParamStore;
use super::rng::Rng;
use super::tensor::numel;
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation tag stored on each node.
#[derive(Clone, Debug)]
pub enum Op {
    /// Constant input, never receives a gradient.
    Input,
    /// Copy of parameter `id` from a [`ParamStore`].
    Param(usize),
    MatMul,
    /// Elementwise add; the second operand may also be a bias row `[c]`
    /// broadcast over the rows of a `[r, c]` first operand.
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Tanh,
    Relu,
    Sigmoid,
    Sqrt,
    Log,
    Concat {
        axis: usize,
    },
    Mean,
    Sum,
    /// Softmax over the last dimension.
    Softmax,
    /// Gathers rows `indices` of a `[v, e]` table.
    EmbeddingLookup {
        indices: Vec<usize>,
    },
    /// Squared Euclidean distance over the last dimension.
    EuclideanSqDistance,
    Dropout {
        mask: Vec<f64>,
    },
    CrossEntropy {
        targets: Vec<usize>,
        ignore_index: usize,
        probs: Vec<f64>,
        counted: usize,
    },
}

impl Op {
    pub fn name(&self) -> &'static str {
        match self {
            Op::Input => "input",
            Op::Param(_) => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "multiply",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Tanh => "tanh",
            Op::Relu => "relu",
            Op::Sigmoid => "sigmoid",
            Op::Sqrt => "sqrt",
            Op::Log => "log",
            Op::Concat { .. } => "concat",
            Op::Mean => "mean",
            Op::Sum => "sum",
            Op::Softmax => "softmax",
            Op::EmbeddingLookup { .. } => "embedding_lookup",
            Op::EuclideanSqDistance => "euclidean_sq_distance",
            Op::Dropout { .. } => "dropout",
            Op::CrossEntropy { .. } => "cross_entropy",
        }
    }
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    inputs: Vec<Var>,
    shape: Vec<usize>,
    value: Vec<f64>,
    needs_grad: bool,
}

/// Mask sampled by [`Graph::dropout`].
#[derive(Clone, Debug, PartialEq)]
pub struct DropoutMask {
    pub keep_probability: f64,
    pub mask: Vec<f64>,
    pub seed: u64,
}

impl DropoutMask {
    /// Samples a mask whose entries are `0` or `1 / keep_probability`.
    pub fn sample(len: usize, keep_probability: f64, seed: u64) -> Result<Self> {
        check_keep(keep_probability)?;
        let scale = 1.0 / keep_probability;
        let mask = if keep_probability >= 1.0 {
            vec![1.0; len]
        } else {
            let mut rng = Rng::new(seed);
            (0..len)
                .map(|_| if rng.uniform() < keep_probability { scale } else { 0.0 })
                .collect()
        };
        Ok(Self {
            keep_probability,
            mask,
            seed,
        })
    }

    pub fn keep_all(len: usize) -> Self {
        Self {
            keep_probability: 1.0,
            mask: vec![1.0; len],
            seed: 0,
        }
    }
}

pub(crate) fn check_keep(keep_probability: f64) -> Result<()> {
    if !(keep_probability > 0.0 && keep_probability <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "keep_probability must lie in (0, 1], got {keep_probability}"
        )));
    }
    Ok(())
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [r, c] => (*r, *c),
        _ => (0, 0),
    }
}

fn mismatch(op: &'static str, shapes: &[&[usize]]) -> Error {
    let listed: Vec<String> = shapes.iter().map(|s| format!("{s:?}")).collect();
    Error::ShapeMismatch {
        op,
        shapes: listed.join(" vs "),
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Vec<f64>>,
    consumed: bool,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn op(&self, v: Var) -> &Op {
        &self.nodes[v.0].op
    }

    pub fn inputs(&self, v: Var) -> &[Var] {
        &self.nodes[v.0].inputs
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[0]
    }

    /// Gradient of the last backward pass with respect to `v`, if it was
    /// on a differentiable path.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).filter(|g| !g.is_empty()).map(|g| g.as_slice())
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, shape: Vec<usize>, value: Vec<f64>) -> Result<Var> {
        if value.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite { op: op.name() });
        }
        let needs_grad = match op {
            Op::Input => false,
            Op::Param(_) => true,
            _ => inputs.iter().any(|i| self.nodes[i.0].needs_grad),
        };
        self.nodes.push(Node {
            op,
            inputs,
            shape,
            value,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Constant input tensor.
    pub fn input(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        if shape.is_empty() || shape.len() > 2 || numel(&shape) != values.len() || values.is_empty() {
            return Err(Error::ShapeMismatch {
                op: "input",
                shapes: format!("{shape:?} with {} values", values.len()),
            });
        }
        self.push(Op::Input, vec![], shape, values)
    }

    /// Differentiable copy of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: usize) -> Var {
        let t = store.get(id);
        self.push(Op::Param(id), vec![], t.shape().to_vec(), t.values.clone())
            .expect("stored parameters are finite")
    }

    /// Generic forward entry point: computes `op(inputs)` and appends the node.
    pub fn apply(&mut self, op: Op, inputs: &[Var]) -> Result<Var> {
        let name = op.name();
        let arity_ok = match &op {
            Op::Input | Op::Param(_) => false,
            Op::Concat { .. } => inputs.len() >= 2,
            Op::MatMul | Op::Add | Op::Sub | Op::Mul | Op::EuclideanSqDistance => inputs.len() == 2,
            _ => inputs.len() == 1,
        };
        if !arity_ok {
            return Err(Error::InvalidArgument(format!(
                "{name}: unsupported arity {}",
                inputs.len()
            )));
        }
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
        let (shape, value, op) = match op {
            Op::MatMul => {
                let (a, b) = (shapes[0], shapes[1]);
                if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
                    return Err(mismatch(name, &shapes));
                }
                let (m, k, n) = (a[0], a[1], b[1]);
                let mut out = vec![0.0; m * n];
                gemm(
                    m,
                    k,
                    n,
                    self.value(inputs[0]),
                    (k, 1),
                    self.value(inputs[1]),
                    (n, 1),
                    &mut out,
                    0.0,
                );
                (vec![m, n], out, Op::MatMul)
            }
            Op::Add => {
                let (a, b) = (shapes[0], shapes[1]);
                let av = self.value(inputs[0]);
                let bv = self.value(inputs[1]);
                let out = if a == b {
                    av.iter().zip(bv).map(|(x, y)| x + y).collect()
                } else if a.len() == 2 && b.len() == 1 && a[1] == b[0] {
                    let c = b[0];
                    av.iter().enumerate().map(|(i, x)| x + bv[i % c]).collect()
                } else {
                    return Err(mismatch(name, &shapes));
                };
                (a.to_vec(), out, Op::Add)
            }
            Op::Sub | Op::Mul => {
                if shapes[0] != shapes[1] {
                    return Err(mismatch(name, &shapes));
                }
                let av = self.value(inputs[0]);
                let bv = self.value(inputs[1]);
                let out = if matches!(op, Op::Sub) {
                    av.iter().zip(bv).map(|(x, y)| x - y).collect()
                } else {
                    av.iter().zip(bv).map(|(x, y)| x * y).collect()
                };
                (shapes[0].to_vec(), out, op)
            }
            Op::Scale(s) => (shapes[0].to_vec(), self.map(inputs[0], |x| x * s), op),
            Op::AddScalar(s) => (shapes[0].to_vec(), self.map(inputs[0], |x| x + s), op),
            Op::Tanh => (shapes[0].to_vec(), self.map(inputs[0], f64::tanh), op),
            Op::Relu => (shapes[0].to_vec(), self.map(inputs[0], |x| x.max(0.0)), op),
            Op::Sigmoid => (shapes[0].to_vec(), self.map(inputs[0], sigmoid), op),
            Op::Sqrt => {
                if self.value(inputs[0]).iter().any(|&x| x < 0.0) {
                    return Err(Error::NonFinite { op: name });
                }
                (shapes[0].to_vec(), self.map(inputs[0], f64::sqrt), op)
            }
            Op::Log => (shapes[0].to_vec(), self.map(inputs[0], f64::ln), op),
            Op::Concat { axis } => self.concat_forward(inputs, axis)?,
            Op::Mean => {
                let v = self.value(inputs[0]);
                (vec![1], vec![v.iter().sum::<f64>() / v.len() as f64], op)
            }
            Op::Sum => (vec![1], vec![self.value(inputs[0]).iter().sum()], op),
            Op::Softmax => {
                let (r, c) = rows_cols(shapes[0]);
                let v = self.value(inputs[0]);
                let mut out = vec![0.0; r * c];
                for i in 0..r {
                    softmax_into(&v[i * c..(i + 1) * c], &mut out[i * c..(i + 1) * c]);
                }
                (shapes[0].to_vec(), out, op)
            }
            Op::EmbeddingLookup { indices } => {
                let t = shapes[0];
                if t.len() != 2 {
                    return Err(mismatch(name, &shapes));
                }
                let (rows, e) = (t[0], t[1]);
                if indices.is_empty() {
                    return Err(Error::InvalidArgument("embedding_lookup: no indices".into()));
                }
                if let Some(bad) = indices.iter().find(|&&i| i >= rows) {
                    return Err(Error::InvalidArgument(format!(
                        "embedding_lookup: index {bad} out of range for table {t:?}"
                    )));
                }
                let table = self.value(inputs[0]);
                let mut out = Vec::with_capacity(indices.len() * e);
                for &i in &indices {
                    out.extend_from_slice(&table[i * e..(i + 1) * e]);
                }
                (vec![indices.len(), e], out, Op::EmbeddingLookup { indices })
            }
            Op::EuclideanSqDistance => {
                if shapes[0] != shapes[1] {
                    return Err(mismatch(name, &shapes));
                }
                let (r, c) = rows_cols(shapes[0]);
                let a = self.value(inputs[0]);
                let b = self.value(inputs[1]);
                let out: Vec<f64> = (0..r)
                    .map(|i| {
                        a[i * c..(i + 1) * c]
                            .iter()
                            .zip(&b[i * c..(i + 1) * c])
                            .map(|(x, y)| (x - y) * (x - y))
                            .sum()
                    })
                    .collect();
                let shape = if shapes[0].len() == 1 { vec![1] } else { vec![r] };
                (shape, out, op)
            }
            Op::Dropout { mask } => {
                if mask.len() != self.value(inputs[0]).len() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        shapes: format!("{:?} vs mask of {}", shapes[0], mask.len()),
                    });
                }
                let out = self.value(inputs[0]).iter().zip(&mask).map(|(x, m)| x * m).collect();
                (shapes[0].to_vec(), out, Op::Dropout { mask })
            }
            Op::CrossEntropy {
                targets, ignore_index, ..
            } => {
                let s = shapes[0];
                if s.len() != 2 || s[0] != targets.len() {
                    return Err(Error::ShapeMismatch {
                        op: name,
                        shapes: format!("logits {s:?} vs {} targets", targets.len()),
                    });
                }
                let (t, v) = (s[0], s[1]);
                let logits = self.value(inputs[0]);
                let mut probs = vec![0.0; t * v];
                let mut total = 0.0;
                let mut counted = 0;
                for (i, &target) in targets.iter().enumerate() {
                    if target == ignore_index {
                        continue;
                    }
                    if target >= v {
                        return Err(Error::InvalidArgument(format!(
                            "cross_entropy: target {target} outside vocabulary of {v}"
                        )));
                    }
                    let row = &logits[i * v..(i + 1) * v];
                    let lse = log_sum_exp(row);
                    total += lse - row[target];
                    softmax_into(row, &mut probs[i * v..(i + 1) * v]);
                    counted += 1;
                }
                if counted == 0 {
                    return Err(Error::InvalidArgument(
                        "cross_entropy: every position is ignored".into(),
                    ));
                }
                (
                    vec![1],
                    vec![total / counted as f64],
                    Op::CrossEntropy {
                        targets,
                        ignore_index,
                        probs,
                        counted,
                    },
                )
            }
            Op::Input | Op::Param(_) => unreachable!("rejected by arity check"),
        };
        self.push(op, inputs.to_vec(), shape, value)
    }

    fn map(&self, v: Var, f: impl Fn(f64) -> f64) -> Vec<f64> {
        self.value(v).iter().map(|&x| f(x)).collect()
    }

    fn concat_forward(&self, inputs: &[Var], axis: usize) -> Result<(Vec<usize>, Vec<f64>, Op)> {
        let shapes: Vec<&[usize]> = inputs.iter().map(|v| self.shape(*v)).collect();
        let first = shapes[0];
        let op = Op::Concat { axis };
        if first.len() == 1 {
            if axis != 0 || shapes.iter().any(|s| s.len() != 1) {
                return Err(mismatch("concat", &shapes));
            }
            let out: Vec<f64> = inputs.iter().flat_map(|v| self.value(*v).iter().copied()).collect();
            let n = out.len();
            return Ok((vec![n], out, op));
        }
        if shapes.iter().any(|s| s.len() != 2) {
            return Err(mismatch("concat", &shapes));
        }
        match axis {
            0 => {
                if shapes.iter().any(|s| s[1] != first[1]) {
                    return Err(mismatch("concat", &shapes));
                }
                let rows = shapes.iter().map(|s| s[0]).sum();
                let out = inputs.iter().flat_map(|v| self.value(*v).iter().copied()).collect();
                Ok((vec![rows, first[1]], out, op))
            }
            1 => {
                if shapes.iter().any(|s| s[0] != first[0]) {
                    return Err(mismatch("concat", &shapes));
                }
                let r = first[0];
                let cols: usize = shapes.iter().map(|s| s[1]).sum();
                let mut out = Vec::with_capacity(r * cols);
                for i in 0..r {
                    for (v, s) in inputs.iter().zip(&shapes) {
                        let c = s[1];
                        out.extend_from_slice(&self.value(*v)[i * c..(i + 1) * c]);
                    }
                }
                Ok((vec![r, cols], out, op))
            }
            _ => Err(mismatch("concat", &shapes)),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::MatMul, &[a, b])
    }
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Add, &[a, b])
    }
    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Sub, &[a, b])
    }
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::Mul, &[a, b])
    }
    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::Scale(s), &[a])
    }
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        self.apply(Op::AddScalar(s), &[a])
    }
    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Tanh, &[a])
    }
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Relu, &[a])
    }
    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sigmoid, &[a])
    }
    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sqrt, &[a])
    }
    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Log, &[a])
    }
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        self.apply(Op::Concat { axis }, parts)
    }
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Mean, &[a])
    }
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Sum, &[a])
    }
    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        self.apply(Op::Softmax, &[a])
    }
    pub fn embedding(&mut self, table: Var, indices: Vec<usize>) -> Result<Var> {
        self.apply(Op::EmbeddingLookup { indices }, &[table])
    }
    pub fn sq_distance(&mut self, a: Var, b: Var) -> Result<Var> {
        self.apply(Op::EuclideanSqDistance, &[a, b])
    }

    /// Euclidean distance over the last dimension; `eps` keeps the square
    /// root differentiable at coincident points.
    pub fn distance(&mut self, a: Var, b: Var, eps: f64) -> Result<Var> {
        let sq = self.sq_distance(a, b)?;
        let shifted = self.add_scalar(sq, eps)?;
        self.sqrt(shifted)
    }

    /// Inverted dropout. With `training == false` the input passes through
    /// unchanged and the returned mask keeps everything.
    pub fn dropout(&mut self, x: Var, keep_probability: f64, seed: u64, training: bool) -> Result<(Var, DropoutMask)> {
        check_keep(keep_probability)?;
        let n = self.value(x).len();
        if !training {
            return Ok((x, DropoutMask::keep_all(n)));
        }
        let mask = DropoutMask::sample(n, keep_probability, seed)?;
        let out = self.apply_mask(x, &mask)?;
        Ok((out, mask))
    }

    /// Applies a previously sampled mask.
    pub fn apply_mask(&mut self, x: Var, mask: &DropoutMask) -> Result<Var> {
        self.apply(
            Op::Dropout {
                mask: mask.mask.clone(),
            },
            &[x],
        )
    }

    /// Mean token negative log-likelihood over positions whose target is not
    /// `ignore_index`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>, ignore_index: usize) -> Result<Var> {
        self.apply(
            Op::CrossEntropy {
                targets,
                ignore_index,
                probs: vec![],
                counted: 0,
            },
            &[logits],
        )
    }

    /// Populates gradients of `loss` with respect to every node on a
    /// differentiable path. A graph can be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.consumed {
            return Err(Error::GraphConsumed);
        }
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::NotScalar(self.nodes[loss.0].shape.clone()));
        }
        self.consumed = true;
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); self.nodes.len()];
        grads[loss.0] = vec![1.0];
        for id in (0..=loss.0).rev() {
            if grads[id].is_empty() || !self.nodes[id].needs_grad {
                continue;
            }
            let upstream = std::mem::take(&mut grads[id]);
            self.backprop_node(id, &upstream, &mut grads)?;
            grads[id] = upstream;
        }
        self.grads = grads;
        Ok(())
    }

    fn backprop_node(&self, id: usize, g: &[f64], grads: &mut [Vec<f64>]) -> Result<()> {
        let node = &self.nodes[id];
        let inputs = &node.inputs;
        let name = node.op.name();
        let acc = |grads: &mut [Vec<f64>], v: Var, f: &mut dyn FnMut(&mut [f64])| {
            let n = &self.nodes[v.0];
            if !n.needs_grad {
                return;
            }
            if grads[v.0].is_empty() {
                grads[v.0] = vec![0.0; n.value.len()];
            }
            f(&mut grads[v.0]);
        };
        match &node.op {
            Op::Input | Op::Param(_) => {}
            Op::MatMul => {
                let (a, b) = (inputs[0], inputs[1]);
                let (m, k) = rows_cols(self.shape(a));
                let n = self.shape(b)[1];
                let bv = self.value(b);
                let av = self.value(a);
                acc(grads, a, &mut |ga| gemm(m, n, k, g, (n, 1), bv, (1, n), ga, 1.0));
                acc(grads, b, &mut |gb| gemm(k, m, n, av, (1, k), g, (n, 1), gb, 1.0));
            }
            Op::Add => {
                let (a, b) = (inputs[0], inputs[1]);
                acc(grads, a, &mut |ga| add_into(ga, g));
                if self.shape(a) == self.shape(b) {
                    acc(grads, b, &mut |gb| add_into(gb, g));
                } else {
                    let c = self.shape(b)[0];
                    acc(grads, b, &mut |gb| {
                        for (i, x) in g.iter().enumerate() {
                            gb[i % c] += x;
                        }
                    });
                }
            }
            Op::Sub => {
                acc(grads, inputs[0], &mut |ga| add_into(ga, g));
                acc(grads, inputs[1], &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, y)| *x -= y)
                });
            }
            Op::Mul => {
                let (a, b) = (inputs[0], inputs[1]);
                let av = self.value(a);
                let bv = self.value(b);
                acc(grads, a, &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * bv[i];
                    }
                });
                acc(grads, b, &mut |gb| {
                    for i in 0..gb.len() {
                        gb[i] += g[i] * av[i];
                    }
                });
            }
            Op::Scale(s) => {
                let s = *s;
                acc(grads, inputs[0], &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, y)| *x += s * y)
                });
            }
            Op::AddScalar(_) => acc(grads, inputs[0], &mut |ga| add_into(ga, g)),
            Op::Tanh => {
                let out = &node.value;
                acc(grads, inputs[0], &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * (1.0 - out[i] * out[i]);
                    }
                });
            }
            Op::Sigmoid => {
                let out = &node.value;
                acc(grads, inputs[0], &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * out[i] * (1.0 - out[i]);
                    }
                });
            }
            Op::Relu => {
                let x = self.value(inputs[0]);
                acc(grads, inputs[0], &mut |ga| {
                    for i in 0..ga.len() {
                        if x[i] > 0.0 {
                            ga[i] += g[i];
                        }
                    }
                });
            }
            Op::Sqrt => {
                let out = &node.value;
                if out.contains(&0.0) {
                    return Err(Error::NonFinite { op: name });
                }
                acc(grads, inputs[0], &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * 0.5 / out[i];
                    }
                });
            }
            Op::Log => {
                let x = self.value(inputs[0]);
                acc(grads, inputs[0], &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] / x[i];
                    }
                });
            }
            Op::Concat { axis } => {
                let shapes: Vec<Vec<usize>> = inputs.iter().map(|v| self.shape(*v).to_vec()).collect();
                if shapes[0].len() == 1 || *axis == 0 {
                    let mut offset = 0;
                    for v in inputs {
                        let n = self.value(*v).len();
                        acc(grads, *v, &mut |gv| add_into(gv, &g[offset..offset + n]));
                        offset += n;
                    }
                } else {
                    let r = shapes[0][0];
                    let total: usize = shapes.iter().map(|s| s[1]).sum();
                    let mut col = 0;
                    for (v, s) in inputs.iter().zip(&shapes) {
                        let c = s[1];
                        acc(grads, *v, &mut |gv| {
                            for i in 0..r {
                                add_into(&mut gv[i * c..(i + 1) * c], &g[i * total + col..i * total + col + c]);
                            }
                        });
                        col += c;
                    }
                }
            }
            Op::Mean => {
                let n = self.value(inputs[0]).len() as f64;
                let up = g[0] / n;
                acc(grads, inputs[0], &mut |ga| ga.iter_mut().for_each(|x| *x += up));
            }
            Op::Sum => {
                let up = g[0];
                acc(grads, inputs[0], &mut |ga| ga.iter_mut().for_each(|x| *x += up));
            }
            Op::Softmax => {
                let (r, c) = rows_cols(&node.shape);
                let y = &node.value;
                acc(grads, inputs[0], &mut |ga| {
                    for i in 0..r {
                        let yr = &y[i * c..(i + 1) * c];
                        let gr = &g[i * c..(i + 1) * c];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            ga[i * c + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::EmbeddingLookup { indices } => {
                let e = self.shape(inputs[0])[1];
                acc(grads, inputs[0], &mut |gt| {
                    for (row, &i) in indices.iter().enumerate() {
                        add_into(&mut gt[i * e..(i + 1) * e], &g[row * e..(row + 1) * e]);
                    }
                });
            }
            Op::EuclideanSqDistance => {
                let (a, b) = (inputs[0], inputs[1]);
                let (r, c) = rows_cols(self.shape(a));
                let av = self.value(a);
                let bv = self.value(b);
                acc(grads, a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += 2.0 * g[i] * (av[i * c + j] - bv[i * c + j]);
                        }
                    }
                });
                acc(grads, b, &mut |gb| {
                    for i in 0..r {
                        for j in 0..c {
                            gb[i * c + j] -= 2.0 * g[i] * (av[i * c + j] - bv[i * c + j]);
                        }
                    }
                });
            }
            Op::Dropout { mask } => {
                acc(grads, inputs[0], &mut |ga| {
                    for i in 0..ga.len() {
                        ga[i] += g[i] * mask[i];
                    }
                });
            }
            Op::CrossEntropy {
                targets,
                ignore_index,
                probs,
                counted,
            } => {
                let v = self.shape(inputs[0])[1];
                let up = g[0] / *counted as f64;
                acc(grads, inputs[0], &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        if t == *ignore_index {
                            continue;
                        }
                        for j in 0..v {
                            gl[i * v + j] += up * probs[i * v + j];
                        }
                        gl[i * v + t] -= up;
                    }
                });
            }
        }
        Ok(())
    }

    /// `(parameter id, gradient)` for every parameter leaf reached by the
    /// last backward pass.
    pub fn param_grads(&self) -> impl Iterator<Item = (usize, &[f64])> {
        self.nodes.iter().enumerate().filter_map(|(i, n)| match n.op {
            Op::Param(id) => self.grads.get(i).filter(|g| !g.is_empty()).map(|g| (id, g.as_slice())),
            _ => None,
        })
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn log_sum_exp(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln()
}

/// Max-subtracted softmax of `row` written into `out`.
pub fn softmax_into(row: &[f64], out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, x) in out.iter_mut().zip(row) {
        *o = (x - max).exp();
        total += *o;
    }
    out.iter_mut().for_each(|o| *o /= total);
}

/// Log-softmax of `row`.
pub fn log_softmax(row: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp(row);
    row.iter().map(|x| x - lse).collect()
}

/// `c = a·b + beta·c` with `a: m×k`, `b: k×n` given by (row, col) strides.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    sa: (usize, usize),
    b: &[f64],
    sb: (usize, usize),
    c: &mut [f64],
    beta: f64,
) {
    // SAFETY: the strides describe in-bounds views of `a` (m×k), `b` (k×n)
    // and the row-major `c` (m×n); callers pass slices of exactly those sizes.
    debug_assert!(c.len() >= m * n);
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            sa.0 as isize,
            sa.1 as isize,
            b.as_ptr(),
            sb.0 as isize,
            sb.1 as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64) -> bool {
        (a - b).abs() < 1e-12
    }

    #[test]
    fn softmax_uniform() {
        let mut g = Graph::new();
        let x = g.input(vec![3], vec![0.0; 3]).unwrap();
        let y = g.softmax(x).unwrap();
        assert!(g.value(y).iter().all(|&p| close(p, 1.0 / 3.0)));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.input(vec![2, 2], vec![1.0, -2.0, 3.5, 0.25]).unwrap();
        let z = g.input(vec![2, 2], vec![0.0; 4]).unwrap();
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn sq_distance_zero() {
        let mut g = Graph::new();
        let a = g.input(vec![2], vec![1.0, 2.0]).unwrap();
        let b = g.input(vec![2], vec![1.0, 2.0]).unwrap();
        let d = g.sq_distance(a, b).unwrap();
        assert_eq!(g.value(d), &[0.0]);
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut g = Graph::new();
        let a = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = g.input(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul") && err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn log_of_zero_is_an_error() {
        let mut g = Graph::new();
        let a = g.input(vec![1], vec![0.0]).unwrap();
        assert!(matches!(g.log(a), Err(Error::NonFinite { op: "log" })));
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("x", vec![1], vec![3.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut store = ParamStore::new();
        let x_id = store.add("x", vec![1], vec![3.0]).unwrap();
        let y_id = store.add("y", vec![1], vec![5.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, x_id);
        let _y = g.param(&store, y_id);
        let loss = g.mul(x, x).unwrap();
        g.backward(loss).unwrap();
        store.accumulate(&g);
        assert_eq!(store.get(y_id).grad, vec![0.0]);
        assert_eq!(store.get(x_id).grad, vec![6.0]);
    }

    #[test]
    fn backward_twice_errors() {
        let mut store = ParamStore::new();
        let id = store.add("x", vec![1], vec![3.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.sum(x).unwrap();
        g.backward(y).unwrap();
        assert!(matches!(g.backward(y), Err(Error::GraphConsumed)));
    }

    #[test]
    fn backward_requires_scalar() {
        let mut store = ParamStore::new();
        let id = store.add("x", vec![2], vec![3.0, 1.0]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let y = g.tanh(x).unwrap();
        assert!(matches!(g.backward(y), Err(Error::NotScalar(_))));
    }

    #[test]
    fn a_plus_a_doubles_gradient() {
        let mut store = ParamStore::new();
        let id = store.add("a", vec![3], vec![0.3, -1.0, 2.0]).unwrap();
        let single = {
            let mut g = Graph::new();
            let a = g.param(&store, id);
            let t = g.tanh(a).unwrap();
            let l = g.sum(t).unwrap();
            g.backward(l).unwrap();
            g.grad(a).unwrap().to_vec()
        };
        let mut g = Graph::new();
        let a = g.param(&store, id);
        let t = g.tanh(a).unwrap();
        let l1 = g.sum(t).unwrap();
        let l = g.add(l1, l1).unwrap();
        g.backward(l).unwrap();
        for (d, s) in g.grad(a).unwrap().iter().zip(&single) {
            assert!(close(*d, 2.0 * s));
        }
    }

    #[test]
    fn cross_entropy_uniform_and_ignored() {
        let mut g = Graph::new();
        let x = g.input(vec![2, 4], vec![0.0; 8]).unwrap();
        let l = g.cross_entropy(x, vec![1, 3], 99).unwrap();
        assert!((g.scalar(l) - 4f64.ln()).abs() < 1e-12);
        assert!(g.cross_entropy(x, vec![99, 99], 99).is_err());
    }

    #[test]
    fn cross_entropy_hand_case() {
        // T=2, V=3, second row ignored except via the first
        let logits = vec![1.0, 2.0, 0.5, -1.0, 0.0, 3.0];
        let mut g = Graph::new();
        let x = g.input(vec![2, 3], logits.clone()).unwrap();
        let l = g.cross_entropy(x, vec![0, 2], 7).unwrap();
        let row = |r: &[f64], t: usize| -> f64 {
            let z: f64 = r.iter().map(|v| v.exp()).sum();
            -(r[t].exp() / z).ln()
        };
        let expect = (row(&logits[0..3], 0) + row(&logits[3..6], 2)) / 2.0;
        assert!((g.scalar(l) - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturates_to_zero() {
        let mut g = Graph::new();
        let x = g.input(vec![1, 3], vec![0.0, 60.0, 0.0]).unwrap();
        let l = g.cross_entropy(x, vec![1], 99).unwrap();
        assert!(g.scalar(l) < 1e-20);
    }

    #[test]
    fn dropout_identity_cases() {
        let mut g = Graph::new();
        let x = g.input(vec![4], vec![1.0, -2.0, 3.0, 4.0]).unwrap();
        let (y, m) = g.dropout(x, 1.0, 9, true).unwrap();
        assert_eq!(g.value(y), g.value(x));
        assert!(m.mask.iter().all(|&v| v == 1.0));
        let (z, _) = g.dropout(x, 0.5, 9, false).unwrap();
        assert_eq!(z, x);
        assert!(g.dropout(x, 0.0, 9, true).is_err());
        assert!(g.dropout(x, 1.5, 9, true).is_err());
    }

    #[test]
    fn dropout_mask_values_and_replay() {
        let a = DropoutMask::sample(200, 0.5, 11).unwrap();
        let b = DropoutMask::sample(200, 0.5, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.mask.iter().all(|&v| v == 0.0 || v == 2.0));
        let c = DropoutMask::sample(200, 0.25, 3).unwrap();
        assert!(c.mask.iter().all(|&v| v == 0.0 || v == 4.0));
    }

    #[test]
    fn dropout_routes_gradient_through_mask() {
        let mut store = ParamStore::new();
        let id = store.add("x", vec![6], vec![1.0; 6]).unwrap();
        let mut g = Graph::new();
        let x = g.param(&store, id);
        let (y, mask) = g.dropout(x, 0.5, 5, true).unwrap();
        let l = g.sum(y).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(x).unwrap(), mask.mask.as_slice());
    }
}
