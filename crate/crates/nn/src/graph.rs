//! Tape-based reverse-mode differentiation.
//!
//! A [`Graph`] records every op eagerly: values are computed when the op is
//! pushed, and [`Graph::backward`] walks the tape in reverse from one or more
//! seeded output gradients. Gradients are only materialised for nodes whose
//! ancestry contains a variable or an unfrozen parameter.

use std::collections::HashMap;

use crate::kernels::{self, ConvGeom};
use crate::{NnError, Result, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        geom: ConvGeom,
    },
    Linear {
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
    },
    LeakyRelu {
        x: NodeId,
        slope: f32,
    },
    Tanh(NodeId),
    Sigmoid(NodeId),
    Exp(NodeId),
    Scale {
        x: NodeId,
        factor: f32,
    },
    Add(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Upsample2x(NodeId),
    ConcatChannels(NodeId, NodeId),
    Reshape(NodeId),
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, NodeId>,
    frozen: Vec<String>,
}

/// Gradients produced by one backward pass, indexed by node.
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    params: HashMap<String, NodeId>,
}

impl Gradients {
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.grads.get_mut(id.0).and_then(|g| g.take())
    }

    /// Gradients of every trainable parameter that was reached.
    pub fn param_grads(mut self) -> HashMap<String, Tensor> {
        let params = std::mem::take(&mut self.params);
        params
            .into_iter()
            .filter_map(|(name, id)| self.take(id).map(|g| (name, g)))
            .collect()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// Parameters whose name starts with `prefix` enter the graph as constants.
    pub fn freeze(&mut self, prefix: impl Into<String>) {
        self.frozen.push(prefix.into());
    }

    pub fn is_frozen(&self, name: &str) -> bool {
        self.frozen.iter().any(|p| name.starts_with(p.as_str()))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A constant input.
    pub fn input(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf we want the gradient of.
    pub fn variable(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Registers a named parameter. Repeated registrations of one name return
    /// the same node, so a module shared between two heads accumulates a
    /// single gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> NodeId {
        if let Some(&id) = self.params.get(name) {
            return id;
        }
        let trainable = !self.is_frozen(name);
        let id = self.push(value.clone(), Op::Leaf, trainable);
        self.params.insert(name.to_string(), id);
        id
    }

    pub fn conv2d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        stride: usize,
        pad: usize,
    ) -> Result<NodeId> {
        let (n, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, k, k2) = self.value(w).dims4()?;
        if wc_in != c_in || k != k2 {
            return Err(NnError::Shape(format!(
                "conv weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        if let Some(b) = b {
            if self.value(b).shape() != [c_out] {
                return Err(NnError::Shape("conv bias must be [c_out]".into()));
            }
        }
        let geom = ConvGeom::new(c_in, h, wd, k, stride, pad)
            .ok_or_else(|| NnError::Shape(format!("kernel {k} does not fit {h}x{wd}")))?;
        let mut out = Tensor::zeros(&[n, c_out, geom.h_out, geom.w_out]);
        kernels::conv2d_forward(
            self.value(x).data(),
            n,
            &geom,
            self.value(w).data(),
            c_out,
            b.map(|b| self.value(b).data()),
            out.data_mut(),
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, rg))
    }

    /// `y = x·wᵀ + b` for `x: [n, in]`, `w: [out, in]`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId> {
        let (n, d_in) = self.value(x).dims2()?;
        let (d_out, wd_in) = self.value(w).dims2()?;
        if wd_in != d_in {
            return Err(NnError::Shape(format!(
                "linear weight {:?} incompatible with input {:?}",
                self.value(w).shape(),
                self.value(x).shape()
            )));
        }
        let mut out = Tensor::zeros(&[n, d_out]);
        let beta = if let Some(b) = b {
            let bias = self.value(b).data();
            if bias.len() != d_out {
                return Err(NnError::Shape("linear bias must be [out]".into()));
            }
            for row in out.data_mut().chunks_mut(d_out) {
                row.copy_from_slice(bias);
            }
            1.0
        } else {
            0.0
        };
        kernels::gemm(
            n,
            d_in,
            d_out,
            self.value(x).data(),
            (d_in as isize, 1),
            self.value(w).data(),
            (1, d_in as isize),
            beta,
            out.data_mut(),
            d_out as isize,
        );
        let rg = self.rg(x) || self.rg(w) || b.is_some_and(|b| self.rg(b));
        Ok(self.push(out, Op::Linear { x, w, b }, rg))
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f32) -> NodeId {
        let out = self.value(x).map(|v| if v > 0.0 { v } else { slope * v });
        let rg = self.rg(x);
        self.push(out, Op::LeakyRelu { x, slope }, rg)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        self.leaky_relu(x, 0.0)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f32::tanh);
        let rg = self.rg(x);
        self.push(out, Op::Tanh(x), rg)
    }

    pub fn sigmoid(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(sigmoid);
        let rg = self.rg(x);
        self.push(out, Op::Sigmoid(x), rg)
    }

    pub fn exp(&mut self, x: NodeId) -> NodeId {
        let out = self.value(x).map(f32::exp);
        let rg = self.rg(x);
        self.push(out, Op::Exp(x), rg)
    }

    pub fn scale(&mut self, x: NodeId, factor: f32) -> NodeId {
        let out = self.value(x).map(|v| v * factor);
        let rg = self.rg(x);
        self.push(out, Op::Scale { x, factor }, rg)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        out.add_assign(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.same_shape(a, b)?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o *= *v;
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Nearest-neighbour upsampling by a factor of two in both spatial axes.
    pub fn upsample2x(&mut self, x: NodeId) -> Result<NodeId> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let mut out = Tensor::zeros(&[n, c, 2 * h, 2 * w]);
        kernels::upsample2x(self.value(x).data(), n * c, h, w, out.data_mut());
        let rg = self.rg(x);
        Ok(self.push(out, Op::Upsample2x(x), rg))
    }

    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (n, ca, h, w) = self.value(a).dims4()?;
        let (nb, cb, hb, wb) = self.value(b).dims4()?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(NnError::Shape(format!(
                "cannot concat {:?} and {:?} along channels",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        let plane = h * w;
        let mut data = Vec::with_capacity(n * (ca + cb) * plane);
        for i in 0..n {
            data.extend_from_slice(&self.value(a).data()[i * ca * plane..(i + 1) * ca * plane]);
            data.extend_from_slice(&self.value(b).data()[i * cb * plane..(i + 1) * cb * plane]);
        }
        let out = Tensor::new(&[n, ca + cb, h, w], data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::ConcatChannels(a, b), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(x);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    fn same_shape(&self, a: NodeId, b: NodeId) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(NnError::Shape(format!(
                "shape mismatch {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    /// Back-propagates the given output gradients through the tape.
    pub fn backward(&self, seeds: Vec<(NodeId, Tensor)>) -> Result<Gradients> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        for (id, g) in seeds {
            if g.shape() != self.value(id).shape() {
                return Err(NnError::Shape(format!(
                    "seed gradient {:?} does not match node {:?}",
                    g.shape(),
                    self.value(id).shape()
                )));
            }
            accumulate(&mut grads[id.0], g);
        }
        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(dy) = grads[idx].take() else { continue };
            self.backward_node(node, &dy, &mut grads);
            grads[idx] = Some(dy);
        }
        // Only leaves and requested nodes are useful to callers, but keeping
        // intermediate gradients around costs nothing extra here.
        Ok(Gradients {
            grads,
            params: self
                .params
                .iter()
                .filter(|(_, id)| self.rg(**id))
                .map(|(k, v)| (k.clone(), *v))
                .collect(),
        })
    }

    fn backward_node(&self, node: &Node, dy: &Tensor, grads: &mut [Option<Tensor>]) {
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let n = xv.shape()[0];
                let c_out = wv.shape()[0];
                let mut dx = self.rg(*x).then(|| Tensor::zeros_like(xv));
                let mut dw = self.rg(*w).then(|| Tensor::zeros_like(wv));
                let mut db = b.filter(|b| self.rg(*b)).map(|b| Tensor::zeros_like(self.value(b)));
                kernels::conv2d_backward(
                    xv.data(),
                    n,
                    geom,
                    wv.data(),
                    c_out,
                    dy.data(),
                    dx.as_mut().map(|t| t.data_mut()),
                    dw.as_mut().map(|t| t.data_mut()),
                    db.as_mut().map(|t| t.data_mut()),
                );
                if let Some(dx) = dx {
                    accumulate(&mut grads[x.0], dx);
                }
                if let Some(dw) = dw {
                    accumulate(&mut grads[w.0], dw);
                }
                if let (Some(b), Some(db)) = (b, db) {
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Linear { x, w, b } => {
                let xv = self.value(*x);
                let wv = self.value(*w);
                let (n, d_in) = (xv.shape()[0], xv.shape()[1]);
                let d_out = wv.shape()[0];
                if self.rg(*x) {
                    let mut dx = Tensor::zeros_like(xv);
                    kernels::gemm(
                        n,
                        d_out,
                        d_in,
                        dy.data(),
                        (d_out as isize, 1),
                        wv.data(),
                        (d_in as isize, 1),
                        0.0,
                        dx.data_mut(),
                        d_in as isize,
                    );
                    accumulate(&mut grads[x.0], dx);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros_like(wv);
                    kernels::gemm(
                        d_out,
                        n,
                        d_in,
                        dy.data(),
                        (1, d_out as isize),
                        xv.data(),
                        (d_in as isize, 1),
                        0.0,
                        dw.data_mut(),
                        d_in as isize,
                    );
                    accumulate(&mut grads[w.0], dw);
                }
                if let Some(b) = b.filter(|b| self.rg(*b)) {
                    let mut db = Tensor::zeros(&[d_out]);
                    for row in dy.data().chunks(d_out) {
                        for (d, r) in db.data_mut().iter_mut().zip(row) {
                            *d += *r;
                        }
                    }
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x);
                let mut dx = dy.clone();
                for (d, v) in dx.data_mut().iter_mut().zip(xv.data()) {
                    if *v <= 0.0 {
                        *d *= slope;
                    }
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Tanh(x) => {
                let mut dx = dy.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= 1.0 - y * y;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Sigmoid(x) => {
                let mut dx = dy.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y * (1.0 - y);
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Exp(x) => {
                let mut dx = dy.clone();
                for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                    *d *= y;
                }
                accumulate(&mut grads[x.0], dx);
            }
            Op::Scale { x, factor } => {
                accumulate(&mut grads[x.0], dy.map(|v| v * factor));
            }
            Op::Add(a, b) => {
                if self.rg(*a) {
                    accumulate(&mut grads[a.0], dy.clone());
                }
                if self.rg(*b) {
                    accumulate(&mut grads[b.0], dy.clone());
                }
            }
            Op::Mul(a, b) => {
                for (this, other) in [(a, b), (b, a)] {
                    if self.rg(*this) {
                        let mut d = dy.clone();
                        for (g, v) in d.data_mut().iter_mut().zip(self.value(*other).data()) {
                            *g *= *v;
                        }
                        accumulate(&mut grads[this.0], d);
                    }
                }
            }
            Op::Upsample2x(x) => {
                let xv = self.value(*x);
                let (n, c, h, w) = xv.dims4().expect("recorded as 4-d");
                let mut dx = Tensor::zeros_like(xv);
                kernels::upsample2x_backward(dy.data(), n * c, h, w, dx.data_mut());
                accumulate(&mut grads[x.0], dx);
            }
            Op::ConcatChannels(a, b) => {
                let (n, ca, h, w) = self.value(*a).dims4().expect("recorded as 4-d");
                let cb = self.value(*b).shape()[1];
                let plane = h * w;
                let ct = ca + cb;
                if self.rg(*a) {
                    let mut da = Vec::with_capacity(n * ca * plane);
                    for i in 0..n {
                        da.extend_from_slice(&dy.data()[i * ct * plane..(i * ct + ca) * plane]);
                    }
                    let da = Tensor::new(self.value(*a).shape(), da).expect("same size");
                    accumulate(&mut grads[a.0], da);
                }
                if self.rg(*b) {
                    let mut db = Vec::with_capacity(n * cb * plane);
                    for i in 0..n {
                        db.extend_from_slice(&dy.data()[(i * ct + ca) * plane..(i + 1) * ct * plane]);
                    }
                    let db = Tensor::new(self.value(*b).shape(), db).expect("same size");
                    accumulate(&mut grads[b.0], db);
                }
            }
            Op::Reshape(x) => {
                let dx = dy
                    .clone()
                    .reshape(self.value(*x).shape())
                    .expect("same element count");
                accumulate(&mut grads[x.0], dx);
            }
        }
    }
}

fn accumulate(slot: &mut Option<Tensor>, g: Tensor) {
    match slot {
        Some(existing) => existing.add_assign(&g),
        None => *slot = Some(g),
    }
}

pub fn sigmoid(v: f32) -> f32 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}
