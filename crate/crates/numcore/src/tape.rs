use crate::error::{NumError, Result};
use crate::tensor::{mm, mm_nt, mm_tn, Tensor};

/// Handle to a node on a [`Tape`]. Only valid for the tape that issued it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(pub(crate) usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Operation record. Inputs are node ids; everything needed by the
/// backward pass beyond input/output values is saved inline.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, k: f64 },
    Sigmoid { a: NodeId },
    Tanh { a: NodeId },
    Relu { a: NodeId },
    Softmax { a: NodeId },
    LogSoftmax { a: NodeId },
    Concat { parts: Vec<NodeId>, axis: usize },
    Slice { a: NodeId, start: usize },
    Row { a: NodeId, index: usize },
    Index { a: NodeId, index: usize },
    Sum { a: NodeId },
    Reshape { a: NodeId },
    Dropout { a: NodeId, mask: Vec<f64> },
    BatchNormTrain(Box<BnRecord>),
    BatchNormEval(Box<BnRecord>),
}

#[derive(Debug, Clone)]
struct BnRecord {
    x: NodeId,
    gamma: NodeId,
    beta: NodeId,
    /// Normalized inputs, same shape as x.
    xhat: Vec<f64>,
    /// Per-column 1/sqrt(var + eps).
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient of the root w.r.t. the given node, if any path reached it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    /// Gradient as a tensor, zero-filled when the node was not reached.
    pub fn dense(&self, id: NodeId, shape: &[usize]) -> Tensor {
        match self.get(id) {
            Some(g) => g.clone(),
            None => Tensor::zeros(shape),
        }
    }
}

/// Append-only record of a forward computation. One tape per episode;
/// rebuilt from scratch each time gradients are needed. Not thread-safe;
/// share read-only parameters across tapes instead.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    fn tensor(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Input node: parameters, constants and observations all enter here.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        self.tensor(id)
    }

    /// Scalar convenience for one-element nodes.
    pub fn scalar_value(&self, id: NodeId) -> Result<f64> {
        self.tensor(id).item()
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        let (sa, sb) = (ta.shape().to_vec(), tb.shape().to_vec());
        match (sa.as_slice(), sb.as_slice()) {
            ([m, k1], [k2, n]) if k1 == k2 => {
                let (m, k, n) = (*m, *k1, *n);
                let values = mm(ta.values(), tb.values(), m, k, n);
                let out = Tensor::new(vec![m, n], values)?;
                Ok(self.push(out, Op::MatMul { a, b }))
            }
            _ => Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: sa,
                rhs: sb,
            }),
        }
    }

    fn elementwise_pair(
        &mut self,
        op_name: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<NodeId> {
        let (ta, tb) = (self.tensor(a), self.tensor(b));
        if ta.shape() != tb.shape() {
            return Err(NumError::ShapeMismatch {
                op: op_name,
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let values = ta
            .values()
            .iter()
            .zip(tb.values())
            .map(|(x, y)| f(*x, *y))
            .collect();
        let out = Tensor::new(ta.shape().to_vec(), values)?;
        Ok(self.push(out, op))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.elementwise_pair("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        let values = self.tensor(a).values().iter().map(|x| x * k).collect();
        let out = Tensor::new(self.tensor(a).shape().to_vec(), values).expect("same shape");
        self.push(out, Op::Scale { a, k })
    }

    fn unary(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let values = self.tensor(a).values().iter().map(|x| f(*x)).collect();
        let out = Tensor::new(self.tensor(a).shape().to_vec(), values).expect("same shape");
        self.push(out, op)
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid { a })
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.unary(a, f64::tanh, Op::Tanh { a })
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    /// Numerically stable softmax over a rank-1 tensor. Max subtraction
    /// keeps exp() in range for arbitrarily large scores.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.tensor(a);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(NumError::InvalidShape {
                op: "softmax",
                shape: t.shape().to_vec(),
                detail: "expected non-empty rank-1 tensor".into(),
            });
        }
        let values = softmax_values(t.values());
        let out = Tensor::vector(values);
        Ok(self.push(out, Op::Softmax { a }))
    }

    /// log(softmax(a)) computed via the log-sum-exp identity, so the
    /// cross-entropy term never evaluates log(0).
    pub fn log_softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let t = self.tensor(a);
        if t.rank() != 1 || t.numel() == 0 {
            return Err(NumError::InvalidShape {
                op: "log_softmax",
                shape: t.shape().to_vec(),
                detail: "expected non-empty rank-1 tensor".into(),
            });
        }
        let xs = t.values();
        let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = xs.iter().map(|x| (x - max).exp()).sum::<f64>().ln() + max;
        let values = xs.iter().map(|x| x - lse).collect();
        let out = Tensor::vector(values);
        Ok(self.push(out, Op::LogSoftmax { a }))
    }

    /// Concatenate along `axis`. Rank-1 tensors join end to end; rank-2
    /// tensors must agree on the other axis.
    pub fn concat(&mut self, parts: &[NodeId], axis: usize) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(NumError::Contract("concat of zero tensors".into()));
        }
        let rank = self.tensor(parts[0]).rank();
        if axis >= rank {
            return Err(NumError::Contract(format!(
                "concat axis {axis} exceeds rank {rank}"
            )));
        }
        for &p in parts {
            let t = self.tensor(p);
            if t.rank() != rank {
                return Err(NumError::ShapeMismatch {
                    op: "concat",
                    lhs: self.tensor(parts[0]).shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
            for d in 0..rank {
                if d != axis && t.shape()[d] != self.tensor(parts[0]).shape()[d] {
                    return Err(NumError::ShapeMismatch {
                        op: "concat",
                        lhs: self.tensor(parts[0]).shape().to_vec(),
                        rhs: t.shape().to_vec(),
                    });
                }
            }
        }
        let out = match rank {
            1 => {
                let mut values = Vec::new();
                for &p in parts {
                    values.extend_from_slice(self.tensor(p).values());
                }
                Tensor::vector(values)
            }
            2 if axis == 0 => {
                let cols = self.tensor(parts[0]).shape()[1];
                let mut values = Vec::new();
                let mut rows = 0;
                for &p in parts {
                    rows += self.tensor(p).shape()[0];
                    values.extend_from_slice(self.tensor(p).values());
                }
                Tensor::new(vec![rows, cols], values)?
            }
            2 => {
                let rows = self.tensor(parts[0]).shape()[0];
                let cols: usize = parts.iter().map(|&p| self.tensor(p).shape()[1]).sum();
                let mut values = vec![0.0; rows * cols];
                let mut col_off = 0;
                for &p in parts {
                    let t = self.tensor(p);
                    let pc = t.shape()[1];
                    for r in 0..rows {
                        values[r * cols + col_off..r * cols + col_off + pc]
                            .copy_from_slice(&t.values()[r * pc..(r + 1) * pc]);
                    }
                    col_off += pc;
                }
                Tensor::new(vec![rows, cols], values)?
            }
            _ => {
                return Err(NumError::InvalidShape {
                    op: "concat",
                    shape: self.tensor(parts[0]).shape().to_vec(),
                    detail: "rank above 2 unsupported".into(),
                })
            }
        };
        Ok(self.push(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Contiguous sub-vector of a rank-1 tensor.
    pub fn slice(&mut self, a: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let t = self.tensor(a);
        if t.rank() != 1 {
            return Err(NumError::InvalidShape {
                op: "slice",
                shape: t.shape().to_vec(),
                detail: "expected rank-1 tensor".into(),
            });
        }
        if start + len > t.numel() {
            return Err(NumError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                shape: t.shape().to_vec(),
            });
        }
        let out = Tensor::vector(t.values()[start..start + len].to_vec());
        Ok(self.push(out, Op::Slice { a, start }))
    }

    /// Row of a rank-2 tensor as a rank-1 tensor.
    pub fn row(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let t = self.tensor(a);
        match t.shape() {
            [rows, cols] => {
                if index >= *rows {
                    return Err(NumError::IndexOutOfBounds {
                        op: "row",
                        index,
                        shape: t.shape().to_vec(),
                    });
                }
                let out = Tensor::vector(t.values()[index * cols..(index + 1) * cols].to_vec());
                Ok(self.push(out, Op::Row { a, index }))
            }
            _ => Err(NumError::InvalidShape {
                op: "row",
                shape: t.shape().to_vec(),
                detail: "expected rank-2 tensor".into(),
            }),
        }
    }

    /// Single element of a rank-1 tensor as a scalar node.
    pub fn index(&mut self, a: NodeId, index: usize) -> Result<NodeId> {
        let t = self.tensor(a);
        if t.rank() != 1 {
            return Err(NumError::InvalidShape {
                op: "index",
                shape: t.shape().to_vec(),
                detail: "expected rank-1 tensor".into(),
            });
        }
        if index >= t.numel() {
            return Err(NumError::IndexOutOfBounds {
                op: "index",
                index,
                shape: t.shape().to_vec(),
            });
        }
        let out = Tensor::scalar(t.values()[index]);
        Ok(self.push(out, Op::Index { a, index }))
    }

    /// Sum of all elements as a scalar node.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.tensor(a).values().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a })
    }

    pub fn reshape(&mut self, a: NodeId, shape: &[usize]) -> Result<NodeId> {
        let t = self.tensor(a);
        let numel: usize = shape.iter().product();
        if numel != t.numel() {
            return Err(NumError::InvalidShape {
                op: "reshape",
                shape: shape.to_vec(),
                detail: format!("operand has {} elements", t.numel()),
            });
        }
        let out = Tensor::new(shape.to_vec(), t.values().to_vec())?;
        Ok(self.push(out, Op::Reshape { a }))
    }

    /// Inverted dropout: kept entries are rescaled by 1/(1-rate) at train
    /// time so eval needs no compensation. `unit_draws` must contain one
    /// uniform [0,1) draw per element, taken from the caller's RNG.
    pub fn dropout(&mut self, a: NodeId, rate: f64, unit_draws: &[f64]) -> Result<NodeId> {
        let t = self.tensor(a);
        if !(0.0..1.0).contains(&rate) {
            return Err(NumError::Contract(format!("dropout rate {rate} not in [0,1)")));
        }
        if unit_draws.len() != t.numel() {
            return Err(NumError::Contract(format!(
                "dropout needs {} draws, got {}",
                t.numel(),
                unit_draws.len()
            )));
        }
        let keep = 1.0 - rate;
        let mask: Vec<f64> = unit_draws
            .iter()
            .map(|u| if *u < rate { 0.0 } else { 1.0 / keep })
            .collect();
        let values = t
            .values()
            .iter()
            .zip(&mask)
            .map(|(x, m)| x * m)
            .collect();
        let out = Tensor::new(t.shape().to_vec(), values)?;
        Ok(self.push(out, Op::Dropout { a, mask }))
    }

    /// Batch statistics of a rank-2 tensor: per-column mean and biased
    /// variance over rows. Exposed so the training loop can fold them into
    /// running statistics in a fixed order.
    pub fn batch_stats(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
        match x.shape() {
            [rows, cols] if *rows > 0 => {
                let (rows, cols) = (*rows, *cols);
                let mut mean = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        mean[c] += x.values()[r * cols + c];
                    }
                }
                for m in mean.iter_mut() {
                    *m /= rows as f64;
                }
                let mut var = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let d = x.values()[r * cols + c] - mean[c];
                        var[c] += d * d;
                    }
                }
                for v in var.iter_mut() {
                    *v /= rows as f64;
                }
                Ok((mean, var))
            }
            _ => Err(NumError::InvalidShape {
                op: "batch_stats",
                shape: x.shape().to_vec(),
                detail: "expected rank-2 tensor with at least one row".into(),
            }),
        }
    }

    /// Batch normalization over the rows of x using the batch's own
    /// statistics (training mode). gamma and beta are rank-1 of width
    /// equal to x's column count.
    pub fn batch_norm_train(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        eps: f64,
    ) -> Result<NodeId> {
        let (mean, var) = Self::batch_stats(self.tensor(x))?;
        self.batch_norm_with(x, gamma, beta, &mean, &var, eps, true)
    }

    /// Batch normalization with frozen statistics (eval mode).
    pub fn batch_norm_eval(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<NodeId> {
        self.batch_norm_with(x, gamma, beta, mean, var, eps, false)
    }

    fn batch_norm_with(
        &mut self,
        x: NodeId,
        gamma: NodeId,
        beta: NodeId,
        mean: &[f64],
        var: &[f64],
        eps: f64,
        train: bool,
    ) -> Result<NodeId> {
        let t = self.tensor(x);
        let cols = match t.shape() {
            [_, c] => *c,
            _ => {
                return Err(NumError::InvalidShape {
                    op: "batch_norm",
                    shape: t.shape().to_vec(),
                    detail: "expected rank-2 tensor".into(),
                })
            }
        };
        let rows = t.shape()[0];
        let (tg, tb) = (self.tensor(gamma), self.tensor(beta));
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(NumError::ShapeMismatch {
                op: "batch_norm",
                lhs: t.shape().to_vec(),
                rhs: tg.shape().to_vec(),
            });
        }
        if mean.len() != cols || var.len() != cols {
            return Err(NumError::Contract(format!(
                "batch_norm stats width {} != {}",
                mean.len(),
                cols
            )));
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let mut xhat = vec![0.0; rows * cols];
        let mut values = vec![0.0; rows * cols];
        let (g, b) = (tg.values().to_vec(), tb.values().to_vec());
        for r in 0..rows {
            for c in 0..cols {
                let h = (t.values()[r * cols + c] - mean[c]) * inv_std[c];
                xhat[r * cols + c] = h;
                values[r * cols + c] = g[c] * h + b[c];
            }
        }
        let out = Tensor::new(vec![rows, cols], values)?;
        let record = Box::new(BnRecord {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        });
        let op = if train {
            Op::BatchNormTrain(record)
        } else {
            Op::BatchNormEval(record)
        };
        Ok(self.push(out, op))
    }

    /// Reverse sweep from a scalar root. Gradients accumulate additively
    /// across fan-out; nodes the root does not depend on stay None.
    pub fn backward(&self, root: NodeId) -> Result<Gradients> {
        if root.0 >= self.nodes.len() {
            return Err(NumError::Contract("backward root off tape".into()));
        }
        if !self.tensor(root).is_scalar() {
            return Err(NumError::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.tensor(root).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Tensor::scalar(1.0));

        // Node ids are already topologically ordered by construction.
        for i in (0..=root.0).rev() {
            let go = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.accumulate(i, &go, &mut grads);
            grads[i] = Some(go);
        }
        Ok(Gradients { grads })
    }

    fn add_grad(&self, grads: &mut [Option<Tensor>], id: NodeId, delta_shape: &[usize], f: impl FnOnce(&mut [f64])) {
        let slot = &mut grads[id.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(delta_shape));
        }
        f(slot.as_mut().unwrap().values_mut());
    }

    fn accumulate(&self, i: usize, go: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (ta, tb) = (self.tensor(*a), self.tensor(*b));
                let (m, k) = (ta.shape()[0], ta.shape()[1]);
                let n = tb.shape()[1];
                let da = mm_nt(go.values(), tb.values(), m, n, k);
                let db = mm_tn(ta.values(), go.values(), m, k, n);
                self.add_grad(grads, *a, ta.shape(), |g| {
                    for (gi, di) in g.iter_mut().zip(&da) {
                        *gi += di;
                    }
                });
                self.add_grad(grads, *b, tb.shape(), |g| {
                    for (gi, di) in g.iter_mut().zip(&db) {
                        *gi += di;
                    }
                });
            }
            Op::Add { a, b } => {
                for id in [a, b] {
                    self.add_grad(grads, *id, go.shape(), |g| {
                        for (gi, di) in g.iter_mut().zip(go.values()) {
                            *gi += di;
                        }
                    });
                }
            }
            Op::Sub { a, b } => {
                self.add_grad(grads, *a, go.shape(), |g| {
                    for (gi, di) in g.iter_mut().zip(go.values()) {
                        *gi += di;
                    }
                });
                self.add_grad(grads, *b, go.shape(), |g| {
                    for (gi, di) in g.iter_mut().zip(go.values()) {
                        *gi -= di;
                    }
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.tensor(*a).values().to_vec(), self.tensor(*b).values().to_vec());
                self.add_grad(grads, *a, go.shape(), |g| {
                    for ((gi, di), y) in g.iter_mut().zip(go.values()).zip(&vb) {
                        *gi += di * y;
                    }
                });
                self.add_grad(grads, *b, go.shape(), |g| {
                    for ((gi, di), x) in g.iter_mut().zip(go.values()).zip(&va) {
                        *gi += di * x;
                    }
                });
            }
            Op::Scale { a, k } => {
                let k = *k;
                self.add_grad(grads, *a, go.shape(), |g| {
                    for (gi, di) in g.iter_mut().zip(go.values()) {
                        *gi += di * k;
                    }
                });
            }
            Op::Sigmoid { a } => {
                let y = node.value.values();
                self.add_grad(grads, *a, go.shape(), |g| {
                    for ((gi, di), yi) in g.iter_mut().zip(go.values()).zip(y) {
                        *gi += di * yi * (1.0 - yi);
                    }
                });
            }
            Op::Tanh { a } => {
                let y = node.value.values();
                self.add_grad(grads, *a, go.shape(), |g| {
                    for ((gi, di), yi) in g.iter_mut().zip(go.values()).zip(y) {
                        *gi += di * (1.0 - yi * yi);
                    }
                });
            }
            Op::Relu { a } => {
                let x = self.tensor(*a).values();
                self.add_grad(grads, *a, go.shape(), |g| {
                    for ((gi, di), xi) in g.iter_mut().zip(go.values()).zip(x) {
                        if *xi > 0.0 {
                            *gi += di;
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let y = node.value.values();
                let dot: f64 = go.values().iter().zip(y).map(|(d, yi)| d * yi).sum();
                self.add_grad(grads, *a, go.shape(), |g| {
                    for ((gi, di), yi) in g.iter_mut().zip(go.values()).zip(y) {
                        *gi += yi * (di - dot);
                    }
                });
            }
            Op::LogSoftmax { a } => {
                let y = node.value.values(); // log-probs
                let total: f64 = go.values().iter().sum();
                self.add_grad(grads, *a, go.shape(), |g| {
                    for ((gi, di), yi) in g.iter_mut().zip(go.values()).zip(y) {
                        *gi += di - yi.exp() * total;
                    }
                });
            }
            Op::Concat { parts, axis } => {
                let rank = self.tensor(parts[0]).rank();
                if rank == 1 || (rank == 2 && *axis == 0) {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.tensor(p).numel();
                        let shape = self.tensor(p).shape().to_vec();
                        let src = &go.values()[offset..offset + n];
                        self.add_grad(grads, p, &shape, |g| {
                            for (gi, di) in g.iter_mut().zip(src) {
                                *gi += di;
                            }
                        });
                        offset += n;
                    }
                } else {
                    // rank-2, axis 1
                    let rows = self.tensor(parts[0]).shape()[0];
                    let total_cols = node.value.shape()[1];
                    let mut col_off = 0;
                    for &p in parts {
                        let pc = self.tensor(p).shape()[1];
                        let shape = self.tensor(p).shape().to_vec();
                        let gov = go.values();
                        self.add_grad(grads, p, &shape, |g| {
                            for r in 0..rows {
                                for c in 0..pc {
                                    g[r * pc + c] += gov[r * total_cols + col_off + c];
                                }
                            }
                        });
                        col_off += pc;
                    }
                }
            }
            Op::Slice { a, start } => {
                let shape = self.tensor(*a).shape().to_vec();
                let start = *start;
                self.add_grad(grads, *a, &shape, |g| {
                    for (j, di) in go.values().iter().enumerate() {
                        g[start + j] += di;
                    }
                });
            }
            Op::Row { a, index } => {
                let shape = self.tensor(*a).shape().to_vec();
                let cols = shape[1];
                let index = *index;
                self.add_grad(grads, *a, &shape, |g| {
                    for (j, di) in go.values().iter().enumerate() {
                        g[index * cols + j] += di;
                    }
                });
            }
            Op::Index { a, index } => {
                let shape = self.tensor(*a).shape().to_vec();
                let index = *index;
                let d = go.values()[0];
                self.add_grad(grads, *a, &shape, |g| {
                    g[index] += d;
                });
            }
            Op::Sum { a } => {
                let shape = self.tensor(*a).shape().to_vec();
                let d = go.values()[0];
                self.add_grad(grads, *a, &shape, |g| {
                    for gi in g.iter_mut() {
                        *gi += d;
                    }
                });
            }
            Op::Reshape { a } => {
                let shape = self.tensor(*a).shape().to_vec();
                self.add_grad(grads, *a, &shape, |g| {
                    for (gi, di) in g.iter_mut().zip(go.values()) {
                        *gi += di;
                    }
                });
            }
            Op::Dropout { a, mask } => {
                self.add_grad(grads, *a, go.shape(), |g| {
                    for ((gi, di), m) in g.iter_mut().zip(go.values()).zip(mask) {
                        *gi += di * m;
                    }
                });
            }
            Op::BatchNormTrain(rec) => {
                let x_shape = self.tensor(rec.x).shape().to_vec();
                let (rows, cols) = (x_shape[0], x_shape[1]);
                let gamma = self.tensor(rec.gamma).values().to_vec();
                let gov = go.values();
                // dgamma, dbeta
                self.add_grad(grads, rec.gamma, &[cols], |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += gov[r * cols + c] * rec.xhat[r * cols + c];
                        }
                    }
                });
                self.add_grad(grads, rec.beta, &[cols], |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += gov[r * cols + c];
                        }
                    }
                });
                // dx through the batch statistics.
                let n = rows as f64;
                let mut mean_dxhat = vec![0.0; cols];
                let mut mean_dxhat_xhat = vec![0.0; cols];
                for r in 0..rows {
                    for c in 0..cols {
                        let dxhat = gov[r * cols + c] * gamma[c];
                        mean_dxhat[c] += dxhat;
                        mean_dxhat_xhat[c] += dxhat * rec.xhat[r * cols + c];
                    }
                }
                for c in 0..cols {
                    mean_dxhat[c] /= n;
                    mean_dxhat_xhat[c] /= n;
                }
                self.add_grad(grads, rec.x, &x_shape, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            let dxhat = gov[r * cols + c] * gamma[c];
                            g[r * cols + c] += rec.inv_std[c]
                                * (dxhat
                                    - mean_dxhat[c]
                                    - rec.xhat[r * cols + c] * mean_dxhat_xhat[c]);
                        }
                    }
                });
            }
            Op::BatchNormEval(rec) => {
                let x_shape = self.tensor(rec.x).shape().to_vec();
                let (rows, cols) = (x_shape[0], x_shape[1]);
                let gamma = self.tensor(rec.gamma).values().to_vec();
                let gov = go.values();
                self.add_grad(grads, rec.gamma, &[cols], |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += gov[r * cols + c] * rec.xhat[r * cols + c];
                        }
                    }
                });
                self.add_grad(grads, rec.beta, &[cols], |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[c] += gov[r * cols + c];
                        }
                    }
                });
                self.add_grad(grads, rec.x, &x_shape, |g| {
                    for r in 0..rows {
                        for c in 0..cols {
                            g[r * cols + c] += gov[r * cols + c] * gamma[c] * rec.inv_std[c];
                        }
                    }
                });
            }
        }
    }
}

/// Softmax on a plain slice; shared by the tape op and callers that only
/// need values.
pub fn softmax_values(xs: &[f64]) -> Vec<f64> {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = xs.iter().map(|x| (x - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}
