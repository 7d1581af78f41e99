use std::collections::BTreeMap;

use super::{DiffError, Tensor};

/// Leaf values keyed by name.
pub type Bindings = BTreeMap<String, Tensor>;

/// Gradients keyed by leaf name.
pub type Gradients = BTreeMap<String, Tensor>;

/// Smallest argument `log` accepts before clamping.
pub const LOG_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf(String),
    Const(Tensor),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    Shift(NodeId, f64),
    MatMul(NodeId, NodeId),
    Conv1d {
        input: NodeId,
        weight: NodeId,
        bias: NodeId,
    },
    Relu(NodeId),
    Sigmoid(NodeId),
    LogSigmoid(NodeId),
    Log(NodeId),
    Log1mExp(NodeId),
    Exp(NodeId),
    Powf(NodeId, f64),
    Pow(NodeId, NodeId),
    Softmax(NodeId),
    Sum(NodeId),
    Max(NodeId),
    Stack(Vec<NodeId>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf(_) => "leaf",
            Op::Const(_) => "const",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Shift(..) => "shift",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::Relu(_) => "relu",
            Op::Sigmoid(_) => "sigmoid",
            Op::LogSigmoid(_) => "log_sigmoid",
            Op::Log(_) => "log",
            Op::Log1mExp(_) => "log1mexp",
            Op::Exp(_) => "exp",
            Op::Powf(..) => "powf",
            Op::Pow(..) => "pow",
            Op::Softmax(_) => "softmax",
            Op::Sum(_) => "sum",
            Op::Max(_) => "max",
            Op::Stack(_) => "stack",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    Same,
    /// rhs is a row vector added to every row of a rank-2 lhs
    Rows,
    /// rhs holds a single element
    Scalar,
}

fn broadcast(lhs: &[usize], rhs: &[usize]) -> Option<Broadcast> {
    if lhs == rhs {
        Some(Broadcast::Same)
    } else if rhs.len() <= 1 && rhs.iter().product::<usize>() == 1 {
        Some(Broadcast::Scalar)
    } else if lhs.len() == 2 && rhs.len() == 1 && rhs[0] == lhs[1] {
        Some(Broadcast::Rows)
    } else {
        None
    }
}

/// Numerically stable logistic function.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(sigmoid(x))` without overflow or cancellation.
pub fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

/// `ln(1 - e^x)` for `x < 0`.
pub fn log1mexp(x: f64) -> f64 {
    if x > -std::f64::consts::LN_2 {
        (-x.exp_m1()).ln()
    } else {
        (-x.exp()).ln_1p()
    }
}

/// An append-only expression graph with a single scalar output.
///
/// Nodes reference only earlier nodes, so the node list is already in
/// topological order. A graph is immutable once built and may be evaluated
/// concurrently with different bindings.
#[derive(Debug, Clone, Default)]
pub struct Graph {
    nodes: Vec<Op>,
    leaves: BTreeMap<String, NodeId>,
    output: Option<NodeId>,
    skew: Vec<(NodeId, f64)>,
}

/// Node values from one forward evaluation.
#[derive(Debug, Clone)]
pub struct Trace {
    values: Vec<Tensor>,
    output: NodeId,
}

impl Trace {
    pub fn value(&self, node: NodeId) -> &Tensor {
        &self.values[node.0]
    }

    pub fn output(&self) -> f64 {
        self.values[self.output.0].data()[0]
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, op: Op) -> NodeId {
        self.nodes.push(op);
        NodeId(self.nodes.len() - 1)
    }

    /// Named input. Requesting the same name twice returns the same node.
    pub fn leaf(&mut self, name: &str) -> NodeId {
        if let Some(&id) = self.leaves.get(name) {
            return id;
        }
        let id = self.push(Op::Leaf(name.to_string()));
        self.leaves.insert(name.to_string(), id);
        id
    }

    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(Op::Const(value))
    }

    pub fn scalar(&mut self, value: f64) -> NodeId {
        self.constant(Tensor::scalar(value))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// `a + c` elementwise.
    pub fn shift(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Shift(a, c))
    }

    /// `[m,n] x [n,p] -> [m,p]` or `[m,n] x [n] -> [m]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.push(Op::MatMul(a, b))
    }

    /// Same-length temporal convolution, see [`conv1d_front_pad`].
    pub fn conv1d(&mut self, input: NodeId, weight: NodeId, bias: NodeId) -> NodeId {
        self.push(Op::Conv1d {
            input,
            weight,
            bias,
        })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sigmoid(a))
    }

    pub fn log_sigmoid(&mut self, a: NodeId) -> NodeId {
        self.push(Op::LogSigmoid(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log(a))
    }

    pub fn log1mexp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Log1mExp(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Exp(a))
    }

    /// `a^c` for a constant exponent.
    pub fn powf(&mut self, a: NodeId, c: f64) -> NodeId {
        self.push(Op::Powf(a, c))
    }

    /// Elementwise `base^exponent`; the base must be positive.
    pub fn pow(&mut self, base: NodeId, exponent: NodeId) -> NodeId {
        self.push(Op::Pow(base, exponent))
    }

    pub fn softmax(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Softmax(a))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Sum(a))
    }

    /// Maximum element. The subgradient goes to the first maximal position.
    pub fn max(&mut self, a: NodeId) -> NodeId {
        self.push(Op::Max(a))
    }

    /// Packs single-element nodes into a vector.
    pub fn stack(&mut self, items: &[NodeId]) -> NodeId {
        self.push(Op::Stack(items.to_vec()))
    }

    pub fn dot(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let m = self.mul(a, b);
        self.sum(m)
    }

    pub fn mean(&mut self, a: NodeId, n: usize) -> NodeId {
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    pub fn set_output(&mut self, node: NodeId) {
        self.output = Some(node);
    }

    pub fn output(&self) -> Option<NodeId> {
        self.output
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf_names(&self) -> impl Iterator<Item = &str> {
        self.leaves.keys().map(String::as_str)
    }

    /// Fault injection: multiplies the adjoint flowing out of `node` by
    /// `factor` during backward. Used to confirm a gradient check can fail.
    pub fn skew_adjoint(&mut self, node: NodeId, factor: f64) {
        self.skew.push((node, factor));
    }

    pub fn forward(&self, bindings: &Bindings) -> Result<f64, DiffError> {
        Ok(self.evaluate(bindings)?.output())
    }

    pub fn evaluate(&self, bindings: &Bindings) -> Result<Trace, DiffError> {
        let output = self.output.ok_or(DiffError::NoOutput)?;
        let mut values: Vec<Tensor> = Vec::with_capacity(self.nodes.len());
        for (idx, op) in self.nodes.iter().enumerate() {
            let v = self.eval_node(idx, op, &values, bindings)?;
            if !v.is_finite() {
                return Err(DiffError::NonFinite {
                    node: idx,
                    op: op.name(),
                });
            }
            values.push(v);
        }
        if values[output.0].len() != 1 {
            return Err(DiffError::NonScalarOutput(
                values[output.0].shape().to_vec(),
            ));
        }
        Ok(Trace { values, output })
    }

    pub fn backward(&self, bindings: &Bindings) -> Result<Gradients, DiffError> {
        Ok(self.value_and_grad(bindings)?.1)
    }

    pub fn value_and_grad(&self, bindings: &Bindings) -> Result<(f64, Gradients), DiffError> {
        let trace = self.evaluate(bindings)?;
        let grads = self.backward_from(&trace);
        Ok((trace.output(), grads))
    }

    /// Reverse sweep over an existing forward trace.
    pub fn backward_from(&self, trace: &Trace) -> Gradients {
        let vals = &trace.values;
        let mut adj: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        adj[trace.output.0] = Some(Tensor::filled(vals[trace.output.0].shape(), 1.0));

        for idx in (0..self.nodes.len()).rev() {
            let Some(mut g) = adj[idx].take() else {
                continue;
            };
            for &(node, factor) in &self.skew {
                if node.0 == idx {
                    g.data_mut().iter_mut().for_each(|x| *x *= factor);
                }
            }
            let out = &vals[idx];
            match &self.nodes[idx] {
                Op::Leaf(_) | Op::Const(_) => {
                    adj[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) | Op::Sub(a, b) => {
                    let sign = if matches!(self.nodes[idx], Op::Sub(..)) {
                        -1.0
                    } else {
                        1.0
                    };
                    let bshape = vals[b.0].shape();
                    let gb = reduce_broadcast(&g, vals[a.0].shape(), bshape, |x, _| sign * x);
                    accumulate(&mut adj, *a, g);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let mode = broadcast(av.shape(), bv.shape()).expect("checked in forward");
                    let ga = Tensor::new(
                        av.shape().to_vec(),
                        g.data()
                            .iter()
                            .enumerate()
                            .map(|(i, gi)| gi * bv.data()[rhs_index(mode, i, av.shape())])
                            .collect(),
                    )
                    .expect("shape preserved");
                    let gb = reduce_broadcast(&g, av.shape(), bv.shape(), |x, i| x * av.data()[i]);
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(a, c) => accumulate(&mut adj, *a, g.map(|x| x * c)),
                Op::Shift(a, _) => accumulate(&mut adj, *a, g),
                Op::MatMul(a, b) => {
                    let (av, bv) = (&vals[a.0], &vals[b.0]);
                    let (m, n) = (av.shape()[0], av.shape()[1]);
                    let p = if bv.rank() == 2 { bv.shape()[1] } else { 1 };
                    let mut ga = vec![0.0; m * n];
                    let mut gb = vec![0.0; n * p];
                    for i in 0..m {
                        for k in 0..n {
                            let aik = av.data()[i * n + k];
                            let mut acc = 0.0;
                            for j in 0..p {
                                let gij = g.data()[i * p + j];
                                acc += gij * bv.data()[k * p + j];
                                gb[k * p + j] += aik * gij;
                            }
                            ga[i * n + k] = acc;
                        }
                    }
                    accumulate(
                        &mut adj,
                        *a,
                        Tensor::new(av.shape().to_vec(), ga).expect("shape"),
                    );
                    accumulate(
                        &mut adj,
                        *b,
                        Tensor::new(bv.shape().to_vec(), gb).expect("shape"),
                    );
                }
                Op::Conv1d {
                    input,
                    weight,
                    bias,
                } => {
                    let (x, w) = (&vals[input.0], &vals[weight.0]);
                    let (gx, gw, gbias) = conv1d_backward(x, w, &g);
                    accumulate(&mut adj, *input, gx);
                    accumulate(&mut adj, *weight, gw);
                    accumulate(&mut adj, *bias, gbias);
                }
                Op::Relu(a) => {
                    let x = &vals[a.0];
                    let d = zip_map(&g, x, |gi, xi| if xi > 0.0 { gi } else { 0.0 });
                    accumulate(&mut adj, *a, d);
                }
                Op::Sigmoid(a) => {
                    let d = zip_map(&g, out, |gi, s| gi * s * (1.0 - s));
                    accumulate(&mut adj, *a, d);
                }
                Op::LogSigmoid(a) => {
                    let d = zip_map(&g, &vals[a.0], |gi, x| gi * sigmoid(-x));
                    accumulate(&mut adj, *a, d);
                }
                Op::Log(a) => {
                    let d = zip_map(&g, &vals[a.0], |gi, x| gi / x.max(LOG_FLOOR));
                    accumulate(&mut adj, *a, d);
                }
                Op::Log1mExp(a) => {
                    let d = zip_map(&g, &vals[a.0], |gi, x| -gi / (-x).exp_m1());
                    accumulate(&mut adj, *a, d);
                }
                Op::Exp(a) => {
                    let d = zip_map(&g, out, |gi, e| gi * e);
                    accumulate(&mut adj, *a, d);
                }
                Op::Powf(a, c) => {
                    let d = zip_map(&g, &vals[a.0], |gi, x| gi * c * x.powf(c - 1.0));
                    accumulate(&mut adj, *a, d);
                }
                Op::Pow(base, exponent) => {
                    let (bv, ev) = (&vals[base.0], &vals[exponent.0]);
                    let n = g.len();
                    let mut gb = vec![0.0; n];
                    let mut ge = vec![0.0; n];
                    for i in 0..n {
                        let (b, e, y, gi) =
                            (bv.data()[i], ev.data()[i], out.data()[i], g.data()[i]);
                        gb[i] = gi * e * b.powf(e - 1.0);
                        ge[i] = gi * y * b.ln();
                    }
                    accumulate(
                        &mut adj,
                        *base,
                        Tensor::new(bv.shape().to_vec(), gb).expect("shape"),
                    );
                    accumulate(
                        &mut adj,
                        *exponent,
                        Tensor::new(ev.shape().to_vec(), ge).expect("shape"),
                    );
                }
                Op::Softmax(a) => {
                    let dot: f64 = g.data().iter().zip(out.data()).map(|(gi, y)| gi * y).sum();
                    let d = zip_map(&g, out, |gi, y| y * (gi - dot));
                    accumulate(&mut adj, *a, d);
                }
                Op::Sum(a) => {
                    let gi = g.data()[0];
                    accumulate(&mut adj, *a, Tensor::filled(vals[a.0].shape(), gi));
                }
                Op::Max(a) => {
                    let x = &vals[a.0];
                    let mut d = Tensor::zeros(x.shape());
                    d.data_mut()[argmax(x.data())] = g.data()[0];
                    accumulate(&mut adj, *a, d);
                }
                Op::Stack(items) => {
                    for (k, item) in items.iter().enumerate() {
                        let shape = vals[item.0].shape().to_vec();
                        let t = Tensor::new(shape, vec![g.data()[k]]).expect("single element");
                        accumulate(&mut adj, *item, t);
                    }
                }
            }
        }

        let mut grads = Gradients::new();
        for (name, id) in &self.leaves {
            let g = adj[id.0]
                .take()
                .unwrap_or_else(|| Tensor::zeros(vals[id.0].shape()));
            grads.insert(name.clone(), g);
        }
        grads
    }

    fn eval_node(
        &self,
        idx: usize,
        op: &Op,
        vals: &[Tensor],
        bindings: &Bindings,
    ) -> Result<Tensor, DiffError> {
        let shape_err = |detail: String| DiffError::Shape {
            node: idx,
            op: op.name(),
            detail,
        };
        let v = |id: &NodeId| &vals[id.0];
        Ok(match op {
            Op::Leaf(name) => bindings
                .get(name)
                .cloned()
                .ok_or_else(|| DiffError::Unbound(name.clone()))?,
            Op::Const(t) => t.clone(),
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) => {
                let (av, bv) = (v(a), v(b));
                let mode = broadcast(av.shape(), bv.shape()).ok_or_else(|| {
                    shape_err(format!(
                        "cannot combine {:?} with {:?}",
                        av.shape(),
                        bv.shape()
                    ))
                })?;
                let f: fn(f64, f64) -> f64 = match op {
                    Op::Add(..) => |x, y| x + y,
                    Op::Sub(..) => |x, y| x - y,
                    _ => |x, y| x * y,
                };
                let data = av
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &x)| f(x, bv.data()[rhs_index(mode, i, av.shape())]))
                    .collect();
                Tensor::new(av.shape().to_vec(), data)?
            }
            Op::Scale(a, c) => v(a).map(|x| x * c),
            Op::Shift(a, c) => v(a).map(|x| x + c),
            Op::MatMul(a, b) => {
                let (av, bv) = (v(a), v(b));
                if av.rank() != 2 {
                    return Err(shape_err(format!(
                        "lhs must be a matrix, got {:?}",
                        av.shape()
                    )));
                }
                let (m, n) = (av.shape()[0], av.shape()[1]);
                let (rows_b, p, out_shape) = match bv.shape() {
                    [r, p] => (*r, *p, vec![m, *p]),
                    [r] => (*r, 1, vec![m]),
                    s => return Err(shape_err(format!("rhs must be rank 1 or 2, got {s:?}"))),
                };
                if rows_b != n {
                    return Err(shape_err(format!(
                        "inner dimensions differ: {n} vs {rows_b}"
                    )));
                }
                let mut out = vec![0.0; m * p];
                for i in 0..m {
                    for k in 0..n {
                        let aik = av.data()[i * n + k];
                        let brow = &bv.data()[k * p..(k + 1) * p];
                        for (o, b) in out[i * p..(i + 1) * p].iter_mut().zip(brow) {
                            *o += aik * b;
                        }
                    }
                }
                Tensor::new(out_shape, out)?
            }
            Op::Conv1d {
                input,
                weight,
                bias,
            } => conv1d_forward(v(input), v(weight), v(bias)).map_err(shape_err)?,
            Op::Relu(a) => v(a).map(|x| if x > 0.0 { x } else { 0.0 }),
            Op::Sigmoid(a) => v(a).map(sigmoid),
            Op::LogSigmoid(a) => v(a).map(log_sigmoid),
            Op::Log(a) => {
                let x = v(a);
                let floor_violation = LOG_FLOOR * (1.0 - 1e-12);
                if x.data()
                    .iter()
                    .any(|&xi| xi.is_nan() || xi < floor_violation)
                {
                    return Err(DiffError::Domain {
                        node: idx,
                        op: op.name(),
                    });
                }
                x.map(|xi| xi.max(LOG_FLOOR).ln())
            }
            Op::Log1mExp(a) => {
                let x = v(a);
                if x.data().iter().any(|&xi| xi.is_nan() || xi >= 0.0) {
                    return Err(DiffError::Domain {
                        node: idx,
                        op: op.name(),
                    });
                }
                x.map(log1mexp)
            }
            Op::Exp(a) => v(a).map(f64::exp),
            Op::Powf(a, c) => v(a).map(|x| x.powf(*c)),
            Op::Pow(base, exponent) => {
                let (bv, ev) = (v(base), v(exponent));
                if bv.shape() != ev.shape() {
                    return Err(shape_err(format!(
                        "base {:?} vs exponent {:?}",
                        bv.shape(),
                        ev.shape()
                    )));
                }
                if bv.data().iter().any(|&b| b.is_nan() || b <= 0.0) {
                    return Err(DiffError::Domain {
                        node: idx,
                        op: op.name(),
                    });
                }
                let data = bv
                    .data()
                    .iter()
                    .zip(ev.data())
                    .map(|(b, e)| b.powf(*e))
                    .collect();
                Tensor::new(bv.shape().to_vec(), data)?
            }
            Op::Softmax(a) => {
                let x = v(a);
                if x.rank() > 1 {
                    return Err(shape_err(format!(
                        "softmax expects a vector, got {:?}",
                        x.shape()
                    )));
                }
                let m = x.data().iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = x.data().iter().map(|xi| (xi - m).exp()).collect();
                let s: f64 = e.iter().sum();
                Tensor::new(x.shape().to_vec(), e.into_iter().map(|ei| ei / s).collect())?
            }
            Op::Sum(a) => Tensor::scalar(v(a).data().iter().sum()),
            Op::Max(a) => {
                let x = v(a);
                if x.is_empty() {
                    return Err(shape_err("max of an empty tensor".into()));
                }
                Tensor::scalar(x.data()[argmax(x.data())])
            }
            Op::Stack(items) => {
                let mut data = Vec::with_capacity(items.len());
                for item in items {
                    let t = v(item);
                    let x = t.item().ok_or_else(|| {
                        shape_err(format!("stack item has shape {:?}", t.shape()))
                    })?;
                    data.push(x);
                }
                Tensor::vector(data)
            }
        })
    }
}

fn rhs_index(mode: Broadcast, i: usize, lhs_shape: &[usize]) -> usize {
    match mode {
        Broadcast::Same => i,
        Broadcast::Scalar => 0,
        Broadcast::Rows => i % lhs_shape[1],
    }
}

/// Sums `f(g_i, i)` into the rhs shape of a broadcast binary op.
fn reduce_broadcast(
    g: &Tensor,
    lhs: &[usize],
    rhs: &[usize],
    f: impl Fn(f64, usize) -> f64,
) -> Tensor {
    let mode = broadcast(lhs, rhs).expect("checked in forward");
    let mut out = Tensor::zeros(rhs);
    for (i, &gi) in g.data().iter().enumerate() {
        out.data_mut()[rhs_index(mode, i, lhs)] += f(gi, i);
    }
    out
}

fn zip_map(g: &Tensor, x: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let data = g
        .data()
        .iter()
        .zip(x.data())
        .map(|(&a, &b)| f(a, b))
        .collect();
    Tensor::new(x.shape().to_vec(), data).expect("same shape")
}

fn accumulate(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
    match &mut adj[id.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

/// Zero rows placed before the sequence for a kernel of size `k`;
/// the remaining `k - 1 - front` go after it.
pub fn conv1d_front_pad(k: usize) -> usize {
    k / 2
}

/// `x: [m, c_in]`, `w: [k, c_in, r]`, `b: [r]` -> `[m, r]`.
pub(crate) fn conv1d_forward(x: &Tensor, w: &Tensor, b: &Tensor) -> Result<Tensor, String> {
    let (m, cin) = match x.shape() {
        [m, c] => (*m, *c),
        s => return Err(format!("input must be [time, channels], got {s:?}")),
    };
    let (k, wc, r) = match w.shape() {
        [k, c, r] => (*k, *c, *r),
        s => {
            return Err(format!(
                "weight must be [kernel, channels, filters], got {s:?}"
            ))
        }
    };
    if k == 0 {
        return Err("kernel size must be at least 1".into());
    }
    if wc != cin {
        return Err(format!(
            "channel axis: input has {cin}, weight expects {wc}"
        ));
    }
    if b.shape() != [r] {
        return Err(format!(
            "filter axis: bias shape {:?}, weight has {r} filters",
            b.shape()
        ));
    }
    let front = conv1d_front_pad(k);
    let mut out = vec![0.0; m * r];
    for t in 0..m {
        for i in 0..k {
            let Some(src) = (t + i).checked_sub(front).filter(|&s| s < m) else {
                continue;
            };
            let xrow = x.row(src);
            for (c, &xv) in xrow.iter().enumerate() {
                let wrow = &w.data()[(i * cin + c) * r..(i * cin + c + 1) * r];
                for (o, wv) in out[t * r..(t + 1) * r].iter_mut().zip(wrow) {
                    *o += xv * wv;
                }
            }
        }
    }
    for row in out.chunks_mut(r) {
        for (o, bv) in row.iter_mut().zip(b.data()) {
            *o += bv;
        }
    }
    Tensor::new(vec![m, r], out).map_err(|e| e.to_string())
}

fn conv1d_backward(x: &Tensor, w: &Tensor, g: &Tensor) -> (Tensor, Tensor, Tensor) {
    let (m, cin) = (x.shape()[0], x.shape()[1]);
    let (k, r) = (w.shape()[0], w.shape()[2]);
    let front = conv1d_front_pad(k);
    let mut gx = Tensor::zeros(x.shape());
    let mut gw = Tensor::zeros(w.shape());
    let mut gb = Tensor::zeros(&[r]);
    for t in 0..m {
        let grow = &g.data()[t * r..(t + 1) * r];
        for (o, gv) in gb.data_mut().iter_mut().zip(grow) {
            *o += gv;
        }
        for i in 0..k {
            let Some(src) = (t + i).checked_sub(front).filter(|&s| s < m) else {
                continue;
            };
            for c in 0..cin {
                let xv = x.data()[src * cin + c];
                let base = (i * cin + c) * r;
                let wrow = &w.data()[base..base + r];
                let mut acc = 0.0;
                for o in 0..r {
                    acc += grow[o] * wrow[o];
                }
                gx.data_mut()[src * cin + c] += acc;
                for (gwv, gv) in gw.data_mut()[base..base + r].iter_mut().zip(grow) {
                    *gwv += xv * gv;
                }
            }
        }
    }
    (gx, gw, gb)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bind(pairs: &[(&str, Tensor)]) -> Bindings {
        pairs
            .iter()
            .map(|(k, v)| (k.to_string(), v.clone()))
            .collect()
    }

    #[test]
    fn sum_of_vector() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let s = g.sum(x);
        g.set_output(s);
        let b = bind(&[("x", Tensor::vector(vec![1., 2., 3.]))]);
        assert_eq!(g.forward(&b).unwrap(), 6.0);
        let grads = g.backward(&b).unwrap();
        assert_eq!(grads["x"].data(), &[1., 1., 1.]);
    }

    #[test]
    fn sigmoid_at_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let s = g.sigmoid(x);
        g.set_output(s);
        let b = bind(&[("x", Tensor::scalar(0.0))]);
        assert_eq!(g.forward(&b).unwrap(), 0.5);
        assert_eq!(g.backward(&b).unwrap()["x"].item(), Some(0.25));
    }

    #[test]
    fn relu_pair() {
        let mut g = Graph::new();
        let a = g.leaf("a");
        let b = g.leaf("b");
        let ra = g.relu(a);
        let rb = g.relu(b);
        let s = g.add(ra, rb);
        g.set_output(s);
        let bindings = bind(&[("a", Tensor::scalar(-2.0)), ("b", Tensor::scalar(3.0))]);
        assert_eq!(g.forward(&bindings).unwrap(), 3.0);
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let r = g.relu(x);
        g.set_output(r);
        let grads = g.backward(&bind(&[("x", Tensor::scalar(0.0))])).unwrap();
        assert_eq!(grads["x"].item(), Some(0.0));
    }

    #[test]
    fn unused_leaf_gets_zero_gradient() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let _unused = g.leaf("u");
        let s = g.sum(x);
        g.set_output(s);
        let grads = g
            .backward(&bind(&[
                ("x", Tensor::scalar(1.0)),
                ("u", Tensor::zeros(&[2, 2])),
            ]))
            .unwrap();
        assert_eq!(grads["u"], Tensor::zeros(&[2, 2]));
    }

    #[test]
    fn shape_error_names_node() {
        let mut g = Graph::new();
        let a = g.leaf("a");
        let b = g.leaf("b");
        let m = g.matmul(a, b);
        let s = g.sum(m);
        g.set_output(s);
        let err = g
            .forward(&bind(&[
                ("a", Tensor::zeros(&[2, 3])),
                ("b", Tensor::zeros(&[4])),
            ]))
            .unwrap_err();
        match err {
            DiffError::Shape { node, op, .. } => {
                assert_eq!(node, 2);
                assert_eq!(op, "matmul");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unbound_leaf_is_error() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        g.set_output(x);
        assert!(matches!(g.forward(&Bindings::new()), Err(DiffError::Unbound(n)) if n == "x"));
    }

    #[test]
    fn log_of_zero_is_domain_error_but_floor_is_tolerated() {
        let mut g = Graph::new();
        let x = g.leaf("x");
        let l = g.log(x);
        g.set_output(l);
        assert!(matches!(
            g.forward(&bind(&[("x", Tensor::scalar(0.0))])),
            Err(DiffError::Domain { .. })
        ));
        let v = g
            .forward(&bind(&[("x", Tensor::scalar(LOG_FLOOR * (1.0 - 1e-14)))]))
            .unwrap();
        assert_eq!(v, LOG_FLOOR.ln());
    }

    #[test]
    fn conv1d_two_tap_front_padding() {
        let x = Tensor::matrix(4, 1, vec![1., 2., 3., 4.]).unwrap();
        let w = Tensor::new(vec![2, 1, 1], vec![0.5, 0.5]).unwrap();
        let b = Tensor::vector(vec![0.0]);
        let y = conv1d_forward(&x, &w, &b).unwrap();
        assert_eq!(y.data(), &[0.5, 1.5, 2.5, 3.5]);
    }

    #[test]
    fn stable_helpers() {
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
        assert!((log_sigmoid(-800.0) + 800.0).abs() < 1e-12);
        assert!((log1mexp(-1e-20) - (1e-20f64).ln()).abs() < 1e-9);
        assert!((log1mexp(-50.0) + (-50.0f64).exp()).abs() < 1e-30);
    }
}
