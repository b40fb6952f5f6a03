use std::collections::HashMap;

use indexmap::IndexMap;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::{self, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

/// Where dropout masks come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DropoutMode {
    /// No dropout stream; calling [`Graph::dropout`] with a positive rate fails.
    Disabled,
    /// Masks drawn from a stream that is replayed identically on every rebuild.
    /// Safe for finite-difference checks.
    Frozen(u64),
    /// Masks drawn for one training step; the graph is marked stochastic.
    Live(u64),
}

#[derive(Debug)]
enum Op {
    Input,
    Param(String),
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Bmm(NodeId, NodeId),
    Transpose(NodeId),
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    AddConst(NodeId),
    Scale(NodeId, f64),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Gelu(NodeId),
    Softmax(NodeId),
    LayerNorm { x: NodeId, gamma: NodeId, beta: NodeId, eps: f64 },
    Dropout { x: NodeId, mask: Tensor },
    Embedding { table: NodeId, ids: Vec<usize> },
    SplitHeads { x: NodeId, heads: usize },
    MergeHeads { x: NodeId, heads: usize },
    SelectPosition { x: NodeId, pos: usize },
    Sum(NodeId),
    BceWithLogits { logits: NodeId, targets: Vec<f64> },
    CrossEntropy { logits: NodeId, labels: Vec<usize> },
}

#[derive(Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Gradients keyed by parameter name. Only parameters connected to the loss
/// have an entry.
pub type Gradients = IndexMap<String, Tensor>;

/// A recorded forward computation. Nodes are appended in execution order, so
/// the node list is always topologically sorted.
#[derive(Debug)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    dropout_mode: DropoutMode,
    dropout_rng: Option<ChaCha8Rng>,
}

impl Graph {
    pub fn new(dropout_mode: DropoutMode) -> Self {
        let dropout_rng = match dropout_mode {
            DropoutMode::Disabled => None,
            DropoutMode::Frozen(s) | DropoutMode::Live(s) => Some(ChaCha8Rng::seed_from_u64(s)),
        };
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            dropout_mode,
            dropout_rng,
        }
    }

    pub fn dropout_mode(&self) -> DropoutMode {
        self.dropout_mode
    }

    /// True when some dropout mask came from a live stream.
    pub fn is_stochastic(&self) -> bool {
        matches!(self.dropout_mode, DropoutMode::Live(_))
            && self.nodes.iter().any(|n| matches!(n.op, Op::Dropout { .. }))
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, op: Op, value: Tensor, inputs: &[NodeId]) -> NodeId {
        let requires_grad = inputs.iter().any(|i| self.nodes[i.0].requires_grad);
        self.nodes.push(Node { op, value, requires_grad });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant leaf; never receives a gradient.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.nodes.push(Node { op: Op::Input, value, requires_grad: false });
        NodeId(self.nodes.len() - 1)
    }

    /// Parameter leaf. Repeated lookups of the same name share one node.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<NodeId> {
        if let Some(&id) = self.params.get(name) {
            return Ok(id);
        }
        let value = store.get(name)?.clone();
        self.nodes.push(Node {
            op: Op::Param(name.to_string()),
            value,
            requires_grad: true,
        });
        let id = NodeId(self.nodes.len() - 1);
        self.params.insert(name.to_string(), id);
        Ok(id)
    }

    /// `x [.., in] · w [in, out] (+ b [out])`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let mut out = tensor::matmul(self.value(x), self.value(w))?;
        if let Some(b) = b {
            out = tensor::add_bias(&out, self.value(b))?;
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(Op::Linear { x, w, b }, out, &inputs))
    }

    pub fn bmm(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::bmm(self.value(a), self.value(b))?;
        Ok(self.push(Op::Bmm(a, b), out, &[a, b]))
    }

    pub fn transpose(&mut self, a: NodeId) -> Result<NodeId> {
        let out = tensor::transpose(self.value(a))?;
        Ok(self.push(Op::Transpose(a), out, &[a]))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::add(self.value(a), self.value(b))?;
        Ok(self.push(Op::Add(a, b), out, &[a, b]))
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let out = tensor::hadamard(self.value(a), self.value(b))?;
        Ok(self.push(Op::Mul(a, b), out, &[a, b]))
    }

    /// Adds a constant tensor (e.g. an additive attention mask).
    pub fn add_const(&mut self, a: NodeId, c: &Tensor) -> Result<NodeId> {
        let out = tensor::add(self.value(a), c)?;
        Ok(self.push(Op::AddConst(a), out, &[a]))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let out = tensor::scale(self.value(a), c);
        self.push(Op::Scale(a, c), out, &[a])
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        let out = tensor::sigmoid(self.value(a));
        self.push(Op::Sigmoid(a), out, &[a])
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let out = tensor::tanh(self.value(a));
        self.push(Op::Tanh(a), out, &[a])
    }

    pub fn gelu(&mut self, a: NodeId) -> NodeId {
        let out = tensor::gelu(self.value(a));
        self.push(Op::Gelu(a), out, &[a])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, a: NodeId) -> Result<NodeId> {
        let axis = self.value(a).rank() - 1;
        let out = tensor::softmax(self.value(a), axis)?;
        Ok(self.push(Op::Softmax(a), out, &[a]))
    }

    pub fn layer_norm(&mut self, x: NodeId, gamma: NodeId, beta: NodeId, eps: f64) -> Result<NodeId> {
        let out = tensor::layer_norm(self.value(x), self.value(gamma), self.value(beta), eps)?;
        Ok(self.push(Op::LayerNorm { x, gamma, beta, eps }, out, &[x, gamma, beta]))
    }

    /// Inverted dropout with a mask drawn from the graph's dropout stream.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::InvalidArgument(format!("dropout rate must be in [0, 1), got {rate}")));
        }
        if rate == 0.0 {
            return Ok(x);
        }
        let rng = self.dropout_rng.as_mut().ok_or_else(|| {
            Error::InvalidArgument("dropout requested on a graph without a dropout stream".into())
        })?;
        let mask = tensor::dropout_mask(self.nodes[x.0].value.shape(), rate, rng);
        let out = tensor::hadamard(self.value(x), &mask)?;
        Ok(self.push(Op::Dropout { x, mask }, out, &[x]))
    }

    /// Row lookup: `ids` index rows of `table [V, H]`; output is `lead_shape ++ [H]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize], lead_shape: &[usize]) -> Result<NodeId> {
        let t = self.value(table);
        if t.rank() != 2 {
            return Err(Error::InvalidShape {
                op: "embedding",
                shape: t.shape().to_vec(),
                reason: "table must be rank 2".into(),
            });
        }
        let (vocab, width) = (t.shape()[0], t.shape()[1]);
        if lead_shape.iter().product::<usize>() != ids.len() {
            return Err(Error::InvalidArgument(format!(
                "embedding: {} ids do not fill shape {lead_shape:?}",
                ids.len()
            )));
        }
        let mut data = Vec::with_capacity(ids.len() * width);
        for &id in ids {
            if id >= vocab {
                return Err(Error::TokenOutOfRange { id, vocab });
            }
            data.extend_from_slice(&t.data()[id * width..(id + 1) * width]);
        }
        let mut shape = lead_shape.to_vec();
        shape.push(width);
        let out = Tensor::new(shape, data)?;
        Ok(self.push(Op::Embedding { table, ids: ids.to_vec() }, out, &[table]))
    }

    /// `[B, S, H] -> [B*heads, S, H/heads]`.
    pub fn split_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || heads == 0 || s[2] % heads != 0 {
            return Err(Error::InvalidShape {
                op: "split_heads",
                shape: s.to_vec(),
                reason: format!("need [B, S, H] with H divisible by {heads}"),
            });
        }
        let (b, seq, h) = (s[0], s[1], s[2]);
        let d = h / heads;
        let mut out = vec![0.0; v.numel()];
        for bi in 0..b {
            for si in 0..seq {
                for a in 0..heads {
                    let src = (bi * seq + si) * h + a * d;
                    let dst = ((bi * heads + a) * seq + si) * d;
                    out[dst..dst + d].copy_from_slice(&v.data()[src..src + d]);
                }
            }
        }
        let out = Tensor::new(vec![b * heads, seq, d], out)?;
        Ok(self.push(Op::SplitHeads { x, heads }, out, &[x]))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: NodeId, heads: usize) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || heads == 0 || s[0] % heads != 0 {
            return Err(Error::InvalidShape {
                op: "merge_heads",
                shape: s.to_vec(),
                reason: format!("need [B*{heads}, S, d]"),
            });
        }
        let out = merge_heads_data(v, heads);
        Ok(self.push(Op::MergeHeads { x, heads }, out, &[x]))
    }

    /// `[B, S, H] -> [B, H]` at sequence position `pos`.
    pub fn select_position(&mut self, x: NodeId, pos: usize) -> Result<NodeId> {
        let v = self.value(x);
        let s = v.shape();
        if s.len() != 3 || pos >= s[1] {
            return Err(Error::InvalidShape {
                op: "select_position",
                shape: s.to_vec(),
                reason: format!("position {pos} out of range"),
            });
        }
        let (b, seq, h) = (s[0], s[1], s[2]);
        let mut out = Vec::with_capacity(b * h);
        for bi in 0..b {
            let src = (bi * seq + pos) * h;
            out.extend_from_slice(&v.data()[src..src + h]);
        }
        let out = Tensor::new(vec![b, h], out)?;
        Ok(self.push(Op::SelectPosition { x, pos }, out, &[x]))
    }

    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let out = Tensor::scalar(tensor::sum(self.value(a)));
        self.push(Op::Sum(a), out, &[a])
    }

    /// Mean binary cross-entropy of `logits [N, 1]` (or `[N]`) against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: NodeId, targets: &[f64]) -> Result<NodeId> {
        let z = self.value(logits);
        if z.numel() != targets.len() || z.last_dim() != 1 && z.rank() != 1 {
            return Err(Error::InvalidArgument(format!(
                "bce: logits {:?} vs {} targets",
                z.shape(),
                targets.len()
            )));
        }
        let n = targets.len() as f64;
        let loss = z
            .data()
            .iter()
            .zip(targets)
            .map(|(&z, &t)| z.max(0.0) - z * t + (-z.abs()).exp().ln_1p())
            .sum::<f64>()
            / n;
        Ok(self.push(
            Op::BceWithLogits { logits, targets: targets.to_vec() },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Mean categorical cross-entropy of `logits [N, C]` against class indices.
    pub fn cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let z = self.value(logits);
        let c = z.last_dim();
        if z.rank() != 2 || z.shape()[0] != labels.len() || labels.iter().any(|&l| l >= c) {
            return Err(Error::InvalidArgument(format!(
                "cross_entropy: logits {:?} vs labels {labels:?}",
                z.shape()
            )));
        }
        let mut loss = 0.0;
        for (row, &l) in z.data().chunks(c).zip(labels) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            loss += lse - row[l];
        }
        loss /= labels.len() as f64;
        Ok(self.push(
            Op::CrossEntropy { logits, labels: labels.to_vec() },
            Tensor::scalar(loss),
            &[logits],
        ))
    }

    /// Reverse-mode sweep from a scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lv.shape(), 1.0));

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            let contribs = self.local_grads(node, &dy)?;
            for (input, g) in contribs {
                if !self.nodes[input.0].requires_grad {
                    continue;
                }
                accumulate(&mut grads[input.0], g)?;
            }
            // parameter leaves keep their gradient
            if matches!(node.op, Op::Param(_)) {
                grads[idx] = Some(dy);
            }
        }

        let mut out = Gradients::new();
        for (idx, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(name) = &node.op {
                if let Some(g) = grads[idx].take() {
                    out.insert(name.clone(), g);
                }
            }
        }
        Ok(out)
    }

    fn local_grads(&self, node: &Node, dy: &Tensor) -> Result<Vec<(NodeId, Tensor)>> {
        let v = |id: NodeId| &self.nodes[id.0].value;
        let needs = |id: NodeId| self.nodes[id.0].requires_grad;
        let grads = match &node.op {
            Op::Input | Op::Param(_) => Vec::new(),
            Op::Linear { x, w, b } => {
                let (xv, wv) = (v(*x), v(*w));
                let (k, n) = (wv.shape()[0], wv.shape()[1]);
                let m = xv.numel() / k;
                let mut out = Vec::new();
                if needs(*x) {
                    let wt = tensor::transpose(wv)?;
                    let dx = tensor::gemm(dy.data(), wt.data(), m, n, k);
                    out.push((*x, Tensor::from_parts(xv.shape().to_vec(), dx)));
                }
                if needs(*w) {
                    let x2 = Tensor::from_parts(vec![m, k], xv.data().to_vec());
                    let xt = tensor::transpose(&x2)?;
                    let dw = tensor::gemm(xt.data(), dy.data(), k, m, n);
                    out.push((*w, Tensor::from_parts(vec![k, n], dw)));
                }
                if let Some(b) = b {
                    if needs(*b) {
                        let mut db = vec![0.0; n];
                        for row in dy.data().chunks(n) {
                            for (d, r) in db.iter_mut().zip(row) {
                                *d += r;
                            }
                        }
                        out.push((*b, Tensor::from_parts(v(*b).shape().to_vec(), db)));
                    }
                }
                out
            }
            Op::Bmm(a, b) => {
                let mut out = Vec::new();
                if needs(*a) {
                    out.push((*a, tensor::bmm(dy, &tensor::transpose(v(*b))?)?));
                }
                if needs(*b) {
                    out.push((*b, tensor::bmm(&tensor::transpose(v(*a))?, dy)?));
                }
                out
            }
            Op::Transpose(a) => vec![(*a, tensor::transpose(dy)?)],
            Op::Add(a, b) => vec![(*a, dy.clone()), (*b, dy.clone())],
            Op::Mul(a, b) => vec![
                (*a, tensor::hadamard(dy, v(*b))?),
                (*b, tensor::hadamard(dy, v(*a))?),
            ],
            Op::AddConst(a) => vec![(*a, dy.clone())],
            Op::Scale(a, c) => vec![(*a, tensor::scale(dy, *c))],
            Op::Sigmoid(a) => {
                let y = &node.value;
                let d = y.data().iter().zip(dy.data()).map(|(&s, &g)| g * s * (1.0 - s)).collect();
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::Tanh(a) => {
                let y = &node.value;
                let d = y.data().iter().zip(dy.data()).map(|(&t, &g)| g * (1.0 - t * t)).collect();
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::Gelu(a) => {
                let x = v(*a);
                let d = x
                    .data()
                    .iter()
                    .zip(dy.data())
                    .map(|(&x, &g)| g * tensor::gelu_grad_scalar(x))
                    .collect();
                vec![(*a, Tensor::from_parts(x.shape().to_vec(), d))]
            }
            Op::Softmax(a) => {
                let y = &node.value;
                let n = y.last_dim();
                let mut d = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(dy.data().chunks(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                    d.extend(yr.iter().zip(gr).map(|(&yi, &gi)| yi * (gi - dot)));
                }
                vec![(*a, Tensor::from_parts(y.shape().to_vec(), d))]
            }
            Op::LayerNorm { x, gamma, beta, eps } => {
                let xv = v(*x);
                let gv = v(*gamma);
                let n = xv.last_dim();
                let nf = n as f64;
                let mut dx = Vec::with_capacity(xv.numel());
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut xhat = vec![0.0; n];
                let mut dxhat = vec![0.0; n];
                for (row, grow) in xv.data().chunks(n).zip(dy.data().chunks(n)) {
                    let (mean, rstd) = tensor::row_stats(row, *eps);
                    let mut sum_dxhat = 0.0;
                    let mut sum_dxhat_xhat = 0.0;
                    for j in 0..n {
                        xhat[j] = (row[j] - mean) * rstd;
                        dxhat[j] = grow[j] * gv.data()[j];
                        sum_dxhat += dxhat[j];
                        sum_dxhat_xhat += dxhat[j] * xhat[j];
                        dgamma[j] += grow[j] * xhat[j];
                        dbeta[j] += grow[j];
                    }
                    for j in 0..n {
                        dx.push(rstd / nf * (nf * dxhat[j] - sum_dxhat - xhat[j] * sum_dxhat_xhat));
                    }
                }
                vec![
                    (*x, Tensor::from_parts(xv.shape().to_vec(), dx)),
                    (*gamma, Tensor::from_parts(gv.shape().to_vec(), dgamma)),
                    (*beta, Tensor::from_parts(v(*beta).shape().to_vec(), dbeta)),
                ]
            }
            Op::Dropout { x, mask } => vec![(*x, tensor::hadamard(dy, mask)?)],
            Op::Embedding { table, ids } => {
                let tv = v(*table);
                let width = tv.shape()[1];
                let mut d = vec![0.0; tv.numel()];
                for (row, &id) in dy.data().chunks(width).zip(ids) {
                    for (dst, g) in d[id * width..(id + 1) * width].iter_mut().zip(row) {
                        *dst += g;
                    }
                }
                vec![(*table, Tensor::from_parts(tv.shape().to_vec(), d))]
            }
            Op::SplitHeads { x, heads } => vec![(*x, merge_heads_data(dy, *heads))],
            Op::MergeHeads { x, heads } => {
                let xs = v(*x).shape();
                let (bh, seq, d) = (xs[0], xs[1], xs[2]);
                let b = bh / heads;
                let h = d * heads;
                let mut out = vec![0.0; dy.numel()];
                for bi in 0..b {
                    for si in 0..seq {
                        for a in 0..*heads {
                            let src = (bi * seq + si) * h + a * d;
                            let dst = ((bi * heads + a) * seq + si) * d;
                            out[dst..dst + d].copy_from_slice(&dy.data()[src..src + d]);
                        }
                    }
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), out))]
            }
            Op::SelectPosition { x, pos } => {
                let xs = v(*x).shape();
                let (b, seq, h) = (xs[0], xs[1], xs[2]);
                let mut out = vec![0.0; b * seq * h];
                for bi in 0..b {
                    let dst = (bi * seq + pos) * h;
                    out[dst..dst + h].copy_from_slice(&dy.data()[bi * h..(bi + 1) * h]);
                }
                vec![(*x, Tensor::from_parts(xs.to_vec(), out))]
            }
            Op::Sum(a) => vec![(*a, Tensor::full(v(*a).shape(), dy.item()))],
            Op::BceWithLogits { logits, targets } => {
                let z = v(*logits);
                let scale = dy.item() / targets.len() as f64;
                let d = z
                    .data()
                    .iter()
                    .zip(targets)
                    .map(|(&z, &t)| (tensor::sigmoid_scalar(z) - t) * scale)
                    .collect();
                vec![(*logits, Tensor::from_parts(z.shape().to_vec(), d))]
            }
            Op::CrossEntropy { logits, labels } => {
                let z = v(*logits);
                let c = z.last_dim();
                let scale = dy.item() / labels.len() as f64;
                let probs = tensor::softmax(z, 1)?;
                let mut d = probs.into_data();
                for (i, &l) in labels.iter().enumerate() {
                    d[i * c + l] -= 1.0;
                }
                d.iter_mut().for_each(|g| *g *= scale);
                vec![(*logits, Tensor::from_parts(z.shape().to_vec(), d))]
            }
        };
        Ok(grads)
    }
}

fn merge_heads_data(v: &Tensor, heads: usize) -> Tensor {
    let s = v.shape();
    let (bh, seq, d) = (s[0], s[1], s[2]);
    let b = bh / heads;
    let h = d * heads;
    let mut out = vec![0.0; v.numel()];
    for bi in 0..b {
        for si in 0..seq {
            for a in 0..heads {
                let dst = (bi * seq + si) * h + a * d;
                let src = ((bi * heads + a) * seq + si) * d;
                out[dst..dst + d].copy_from_slice(&v.data()[src..src + d]);
            }
        }
    }
    Tensor::from_parts(vec![b, seq, h], out)
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) -> Result<()> {
    match slot {
        Some(existing) => {
            if existing.shape() != g.shape() {
                return Err(Error::shape("accumulate", existing.shape(), g.shape()));
            }
            for (e, v) in existing.data_mut().iter_mut().zip(g.data()) {
                *e += v;
            }
        }
        None => *slot = Some(g),
    }
    Ok(())
}
