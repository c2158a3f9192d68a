//! Define-by-run compute graph with reverse-mode differentiation.
//!
//! Every primitive is evaluated eagerly as it is recorded, so node order is a
//! topological order. A recorded graph can be re-evaluated with new named
//! inputs through [`Graph::forward`], after which [`Graph::backward`]
//! propagates a seed gradient back to every node that requires one.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::kernels::{gemm_acc, gemm_nt_acc, gemm_tn_acc, transpose};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::{numel, strides, Tensor};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Constant,
    Input(String),
    Param,
    MatMul,
    Add,
    Sub,
    Mul,
    Scale(f64),
    AddScalar(f64),
    Conv1d { stride: usize, pad: usize },
    GroupNorm { groups: usize, eps: f64 },
    LayerNorm { eps: f64 },
    Softmax,
    Gelu,
    Mish,
    Mean { axis: usize },
    MeanAll,
    SumAll,
    Gather { axis: usize, indices: Vec<usize> },
    Concat { axis: usize },
    Reshape(Vec<usize>),
    Permute(Vec<usize>),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Constant => "constant",
            Op::Input(_) => "input",
            Op::Param => "param",
            Op::MatMul => "matmul",
            Op::Add => "add",
            Op::Sub => "sub",
            Op::Mul => "mul",
            Op::Scale(_) => "scale",
            Op::AddScalar(_) => "add_scalar",
            Op::Conv1d { .. } => "conv1d",
            Op::GroupNorm { .. } => "group_norm",
            Op::LayerNorm { .. } => "layer_norm",
            Op::Softmax => "softmax",
            Op::Gelu => "gelu",
            Op::Mish => "mish",
            Op::Mean { .. } => "mean",
            Op::MeanAll => "mean_all",
            Op::SumAll => "sum_all",
            Op::Gather { .. } => "gather",
            Op::Concat { .. } => "concat",
            Op::Reshape(_) => "reshape",
            Op::Permute(_) => "permute",
        }
    }

    fn is_leaf(&self) -> bool {
        matches!(self, Op::Constant | Op::Input(_) | Op::Param)
    }
}

struct Node<T> {
    op: Op,
    inputs: Vec<usize>,
    value: Tensor<T>,
    /// Op-specific forward state kept for the backward pass.
    saved: Vec<T>,
    requires_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: Vec<(ParamId, usize)>,
    inputs: Vec<(String, usize)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn wrt(&self, var: Var) -> Option<&Tensor<T>> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
    }

    /// Gradient for each parameter that entered the graph.
    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> + '_ {
        self.params
            .iter()
            .filter_map(|&(id, node)| self.grads[node].as_ref().map(|g| (id, g)))
    }

    /// Parameter gradients indexed by `ParamId`, moved out of `self`.
    pub fn into_param_grads(mut self, num_params: usize) -> Vec<Option<Tensor<T>>> {
        let mut out: Vec<Option<Tensor<T>>> = (0..num_params).map(|_| None).collect();
        for &(id, node) in &self.params {
            if let Some(slot) = out.get_mut(id.0) {
                *slot = self.grads[node].take();
            }
        }
        out
    }

    /// Gradients keyed by input name, for inputs marked as requiring grad.
    pub fn inputs(&self) -> HashMap<String, Tensor<T>> {
        self.inputs
            .iter()
            .filter_map(|(name, node)| self.grads[*node].clone().map(|g| (name.clone(), g)))
            .collect()
    }
}

pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grad_enabled: bool,
    /// Set while placeholder inputs hold dummy values that `forward` has not
    /// yet replaced.
    stale: bool,
    params: HashMap<ParamId, usize>,
    outputs: Vec<(String, usize)>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    /// A graph that records what backward needs.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            stale: false,
            params: HashMap::new(),
            outputs: Vec::new(),
        }
    }

    /// A graph for inference: parameters do not require gradients.
    pub fn inference() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push_leaf(&mut self, op: Op, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            op,
            inputs: Vec::new(),
            value,
            saved: Vec::new(),
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push_leaf(Op::Constant, value, false)
    }

    /// Named input bound to `value`.
    pub fn input(&mut self, name: &str, value: Tensor<T>, requires_grad: bool) -> Var {
        let rg = requires_grad && self.grad_enabled;
        self.push_leaf(Op::Input(name.to_string()), value, rg)
    }

    /// Named input whose value is supplied later by [`Graph::forward`].
    pub fn placeholder(&mut self, name: &str, shape: &[usize], requires_grad: bool) -> Var {
        self.stale = true;
        self.input(name, Tensor::zeros(shape.to_vec()), requires_grad)
    }

    /// Leaf bound to a parameter; repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&n) = self.params.get(&id) {
            return Var(n);
        }
        let v = self.push_leaf(Op::Param, store.get(id).clone(), self.grad_enabled);
        self.params.insert(id, v.0);
        v
    }

    pub fn set_output(&mut self, name: &str, v: Var) {
        self.outputs.push((name.to_string(), v.0));
    }

    fn record(&mut self, op: Op, inputs: Vec<usize>) -> Result<Var> {
        let node = self.nodes.len();
        let (value, saved) = {
            let ins: Vec<&Tensor<T>> = inputs.iter().map(|&i| &self.nodes[i].value).collect();
            eval(&op, &ins, node)?
        };
        if !self.stale && !value.is_finite() {
            return Err(Error::NonFinite {
                op: op.name(),
                node,
            });
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            op,
            inputs,
            value,
            saved,
            requires_grad,
        });
        Ok(Var(node))
    }

    /// Batched matrix product. `a` is `[.., m, k]`; `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same batch dims.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::MatMul, vec![a.0, b.0])
    }

    /// Elementwise sum; `b` may broadcast along axes where its size is 1
    /// provided it has the same rank as `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Add, vec![a.0, b.0])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Sub, vec![a.0, b.0])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.record(Op::Mul, vec![a.0, b.0])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::Scale(c), vec![a.0])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.record(Op::AddScalar(c), vec![a.0])
    }

    /// `x: [b, c_in, l]`, `w: [c_out, c_in, k]` → `[b, c_out, l_out]`.
    pub fn conv1d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        self.record(Op::Conv1d { stride, pad }, vec![x.0, w.0])
    }

    /// Normalizes `[b, c, l]` over each group of `c / groups` channels.
    pub fn group_norm(&mut self, x: Var, groups: usize, eps: f64) -> Result<Var> {
        self.record(Op::GroupNorm { groups, eps }, vec![x.0])
    }

    /// Normalizes over the last axis.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Result<Var> {
        self.record(Op::LayerNorm { eps }, vec![x.0])
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Softmax, vec![x.0])
    }

    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Gelu, vec![x.0])
    }

    pub fn mish(&mut self, x: Var) -> Result<Var> {
        self.record(Op::Mish, vec![x.0])
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.record(Op::Mean { axis }, vec![x.0])
    }

    pub fn mean_all(&mut self, x: Var) -> Result<Var> {
        self.record(Op::MeanAll, vec![x.0])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        self.record(Op::SumAll, vec![x.0])
    }

    /// Selects `indices` along `axis` (repeats allowed).
    pub fn gather(&mut self, x: Var, axis: usize, indices: Vec<usize>) -> Result<Var> {
        self.record(Op::Gather { axis, indices }, vec![x.0])
    }

    /// Contiguous range `start..start + len` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        self.gather(x, axis, (start..start + len).collect())
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        self.record(Op::Concat { axis }, xs.iter().map(|v| v.0).collect())
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        self.record(Op::Reshape(shape.to_vec()), vec![x.0])
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        self.record(Op::Permute(perm.to_vec()), vec![x.0])
    }

    /// Re-evaluates every node in order with named inputs rebound, returning
    /// the outputs registered through [`Graph::set_output`].
    pub fn forward(
        &mut self,
        inputs: &HashMap<String, Tensor<T>>,
    ) -> Result<HashMap<String, Tensor<T>>> {
        for node in 0..self.nodes.len() {
            let op = self.nodes[node].op.clone();
            match &op {
                Op::Input(name) => {
                    let v = inputs
                        .get(name)
                        .ok_or_else(|| Error::Usage(format!("input `{name}` is not bound")))?;
                    if v.shape() != self.nodes[node].value.shape() {
                        return Err(Error::shape(
                            "input",
                            node,
                            format!(
                                "`{name}` declared {:?}, bound {:?}",
                                self.nodes[node].value.shape(),
                                v.shape()
                            ),
                        ));
                    }
                    self.nodes[node].value = v.clone();
                }
                Op::Constant | Op::Param => {}
                _ => {
                    let (value, saved) = {
                        let ins: Vec<&Tensor<T>> = self.nodes[node]
                            .inputs
                            .iter()
                            .map(|&i| &self.nodes[i].value)
                            .collect();
                        eval(&op, &ins, node)?
                    };
                    if !value.is_finite() {
                        return Err(Error::NonFinite {
                            op: op.name(),
                            node,
                        });
                    }
                    self.nodes[node].value = value;
                    self.nodes[node].saved = saved;
                }
            }
        }
        self.stale = false;
        Ok(self
            .outputs
            .iter()
            .map(|(name, n)| (name.clone(), self.nodes[*n].value.clone()))
            .collect())
    }

    /// Reverse pass from `root`, seeded with `seed` (same shape as `root`).
    pub fn backward_with(&self, root: Var, seed: Tensor<T>) -> Result<Gradients<T>> {
        if self.stale {
            return Err(Error::Usage(
                "backward called before forward bound the graph inputs".into(),
            ));
        }
        if seed.shape() != self.shape(root) {
            return Err(Error::shape(
                "backward",
                root.0,
                format!("seed {:?} vs root {:?}", seed.shape(), self.shape(root)),
            ));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for n in (0..=root.0).rev() {
            let node = &self.nodes[n];
            if !node.requires_grad || node.op.is_leaf() {
                continue;
            }
            let Some(g) = grads[n].take() else { continue };
            let ins: Vec<&Tensor<T>> = node.inputs.iter().map(|&i| &self.nodes[i].value).collect();
            let wants: Vec<bool> = node
                .inputs
                .iter()
                .map(|&i| self.nodes[i].requires_grad)
                .collect();
            let input_grads = vjp(&node.op, &ins, &node.value, &node.saved, &g, &wants);
            for ((&i, want), ig) in node.inputs.iter().zip(wants).zip(input_grads) {
                if !want {
                    continue;
                }
                let Some(ig) = ig else { continue };
                match &mut grads[i] {
                    Some(acc) => {
                        for (a, b) in acc.data_mut().iter_mut().zip(ig.data()) {
                            *a = *a + *b;
                        }
                    }
                    slot => *slot = Some(ig),
                }
            }
            grads[n] = Some(g);
        }
        let params = self.params.iter().map(|(&id, &n)| (id, n)).collect();
        let inputs = self
            .nodes
            .iter()
            .enumerate()
            .filter_map(|(i, node)| match &node.op {
                Op::Input(name) if node.requires_grad => Some((name.clone(), i)),
                _ => None,
            })
            .collect();
        Ok(Gradients {
            grads,
            params,
            inputs,
        })
    }

    /// Reverse pass from a scalar root with seed 1.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>> {
        let shape = self.shape(root).to_vec();
        if numel(&shape) != 1 {
            return Err(Error::Usage(format!(
                "backward needs a scalar root, got {shape:?}; use backward_with"
            )));
        }
        self.backward_with(root, Tensor::ones(shape))
    }
}

// ---------------------------------------------------------------------------
// forward kernels

fn eval<T: Scalar>(op: &Op, ins: &[&Tensor<T>], node: usize) -> Result<(Tensor<T>, Vec<T>)> {
    let name = op.name();
    let out = match op {
        Op::Constant | Op::Input(_) | Op::Param => unreachable!("leaves are not evaluated"),
        Op::MatMul => (matmul_fwd(ins[0], ins[1], node)?, Vec::new()),
        Op::Add => (binary(ins[0], ins[1], name, node, |a, b| a + b)?, Vec::new()),
        Op::Sub => (binary(ins[0], ins[1], name, node, |a, b| a - b)?, Vec::new()),
        Op::Mul => (binary(ins[0], ins[1], name, node, |a, b| a * b)?, Vec::new()),
        Op::Scale(c) => {
            let c = T::lit(*c);
            (ins[0].map(|x| x * c), Vec::new())
        }
        Op::AddScalar(c) => {
            let c = T::lit(*c);
            (ins[0].map(|x| x + c), Vec::new())
        }
        Op::Conv1d { stride, pad } => conv1d_fwd(ins[0], ins[1], *stride, *pad, node)?,
        Op::GroupNorm { groups, eps } => group_norm_fwd(ins[0], *groups, *eps, node)?,
        Op::LayerNorm { eps } => layer_norm_fwd(ins[0], *eps, node)?,
        Op::Softmax => (softmax_fwd(ins[0], node)?, Vec::new()),
        Op::Gelu => (ins[0].map(|x| gelu(x).0), Vec::new()),
        Op::Mish => (ins[0].map(|x| mish(x).0), Vec::new()),
        Op::Mean { axis } => (mean_axis_fwd(ins[0], *axis, node)?, Vec::new()),
        Op::MeanAll => (Tensor::scalar(ins[0].mean()), Vec::new()),
        Op::SumAll => (Tensor::scalar(ins[0].sum()), Vec::new()),
        Op::Gather { axis, indices } => (gather_fwd(ins[0], *axis, indices, node)?, Vec::new()),
        Op::Concat { axis } => (concat_fwd(ins, *axis, node)?, Vec::new()),
        Op::Reshape(shape) => {
            if numel(shape) != ins[0].numel() {
                return Err(Error::shape(
                    name,
                    node,
                    format!("{:?} -> {:?}", ins[0].shape(), shape),
                ));
            }
            (ins[0].clone().reshape(shape.clone())?, Vec::new())
        }
        Op::Permute(perm) => (permute_fwd(ins[0], perm, node)?, Vec::new()),
    };
    Ok(out)
}

fn split_matmul(
    a: &[usize],
    b: &[usize],
    node: usize,
) -> Result<(usize, usize, usize, usize, bool)> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::shape("matmul", node, format!("{a:?} x {b:?}")));
    }
    let (m, k) = (a[a.len() - 2], a[a.len() - 1]);
    let (kb, n) = (b[b.len() - 2], b[b.len() - 1]);
    let batch = numel(&a[..a.len() - 2]);
    let shared = b.len() == 2;
    if k != kb || (!shared && a[..a.len() - 2] != b[..b.len() - 2]) {
        return Err(Error::shape("matmul", node, format!("{a:?} x {b:?}")));
    }
    Ok((batch, m, k, n, shared))
}

fn matmul_fwd<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, node: usize) -> Result<Tensor<T>> {
    let (batch, m, k, n, shared) = split_matmul(a.shape(), b.shape(), node)?;
    let mut out = vec![T::zero(); batch * m * n];
    if shared {
        // fold the batch into the row dimension
        gemm_acc(batch * m, k, n, a.data(), b.data(), &mut out);
    } else {
        for bi in 0..batch {
            gemm_acc(
                m,
                k,
                n,
                &a.data()[bi * m * k..(bi + 1) * m * k],
                &b.data()[bi * k * n..(bi + 1) * k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
            );
        }
    }
    let mut shape = a.shape().to_vec();
    *shape.last_mut().unwrap() = n;
    Tensor::new(shape, out)
}

/// Broadcast of rank-aligned `b` over `a` as merged `(len, b_stride)` axes,
/// outermost first. Axes are merged while they stay affine in `b`.
fn broadcast_plan(a: &[usize], b: &[usize]) -> Vec<(usize, usize)> {
    let bs = strides(b);
    let mut dims: Vec<(usize, usize)> = Vec::with_capacity(a.len());
    for ax in 0..a.len() {
        if a[ax] == 1 {
            continue;
        }
        let s = if b[ax] == 1 { 0 } else { bs[ax] };
        if let Some(last) = dims.last_mut() {
            if last.1 == s * a[ax] {
                last.0 *= a[ax];
                last.1 = s;
                continue;
            }
        }
        dims.push((a[ax], s));
    }
    if dims.is_empty() {
        dims.push((1, 0));
    }
    dims
}

/// Calls `run(a_start, b_start, len, b_stride)` for each innermost run of
/// contiguous `a` elements, in order.
fn for_each_run(a: &[usize], b: &[usize], mut run: impl FnMut(usize, usize, usize, usize)) {
    let plan = broadcast_plan(a, b);
    let (inner, outer) = plan.split_last().unwrap();
    let (len, stride) = *inner;
    let mut idx = vec![0usize; outer.len()];
    let mut a_off = 0;
    let mut b_off = 0;
    loop {
        run(a_off, b_off, len, stride);
        a_off += len;
        let mut ax = outer.len();
        loop {
            if ax == 0 {
                return;
            }
            ax -= 1;
            idx[ax] += 1;
            b_off += outer[ax].1;
            if idx[ax] < outer[ax].0 {
                break;
            }
            b_off -= outer[ax].1 * idx[ax];
            idx[ax] = 0;
        }
    }
}

/// `out[i] = f(a[i], b[map(i)])`.
fn broadcast_zip<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Vec<T> {
    let (ad, bd) = (a.data(), b.data());
    if a.shape() == b.shape() {
        return ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
    }
    let mut out = vec![T::zero(); ad.len()];
    for_each_run(a.shape(), b.shape(), |ao, bo, len, st| {
        let dst = &mut out[ao..ao + len];
        let src = &ad[ao..ao + len];
        match st {
            0 => {
                let y = bd[bo];
                for (o, &x) in dst.iter_mut().zip(src) {
                    *o = f(x, y);
                }
            }
            1 => {
                for ((o, &x), &y) in dst.iter_mut().zip(src).zip(&bd[bo..bo + len]) {
                    *o = f(x, y);
                }
            }
            _ => {
                for (j, (o, &x)) in dst.iter_mut().zip(src).enumerate() {
                    *o = f(x, bd[bo + j * st]);
                }
            }
        }
    });
    out
}

fn check_broadcast(a: &[usize], b: &[usize], op: &'static str, node: usize) -> Result<()> {
    let ok = a.len() == b.len() && a.iter().zip(b).all(|(&x, &y)| x == y || y == 1);
    if ok {
        Ok(())
    } else {
        Err(Error::shape(op, node, format!("{a:?} with {b:?}")))
    }
}

fn binary<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    op: &'static str,
    node: usize,
    f: impl Fn(T, T) -> T,
) -> Result<Tensor<T>> {
    check_broadcast(a.shape(), b.shape(), op, node)?;
    Tensor::new(a.shape().to_vec(), broadcast_zip(a, b, f))
}

struct ConvDims {
    batch: usize,
    c_in: usize,
    len: usize,
    c_out: usize,
    k: usize,
    l_out: usize,
}

fn conv_dims(
    x: &[usize],
    w: &[usize],
    stride: usize,
    pad: usize,
    node: usize,
) -> Result<ConvDims> {
    if x.len() != 3 || w.len() != 3 || x[1] != w[1] || stride == 0 || x[2] + 2 * pad < w[2] {
        return Err(Error::shape(
            "conv1d",
            node,
            format!("x {x:?}, w {w:?}, stride {stride}, pad {pad}"),
        ));
    }
    Ok(ConvDims {
        batch: x[0],
        c_in: x[1],
        len: x[2],
        c_out: w[0],
        k: w[2],
        l_out: (x[2] + 2 * pad - w[2]) / stride + 1,
    })
}

/// `[b, c_in, l]` → `[b·l_out, c_in·k]`.
fn im2col<T: Scalar>(x: &[T], d: &ConvDims, stride: usize, pad: usize) -> Vec<T> {
    let row = d.c_in * d.k;
    let mut cols = vec![T::zero(); d.batch * d.l_out * row];
    for b in 0..d.batch {
        for l in 0..d.l_out {
            let dst = &mut cols[(b * d.l_out + l) * row..(b * d.l_out + l + 1) * row];
            for c in 0..d.c_in {
                let src = &x[(b * d.c_in + c) * d.len..(b * d.c_in + c + 1) * d.len];
                for kk in 0..d.k {
                    let pos = (l * stride + kk) as isize - pad as isize;
                    if pos >= 0 && (pos as usize) < d.len {
                        dst[c * d.k + kk] = src[pos as usize];
                    }
                }
            }
        }
    }
    cols
}

fn conv1d_fwd<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    stride: usize,
    pad: usize,
    node: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let d = conv_dims(x.shape(), w.shape(), stride, pad, node)?;
    let cols = im2col(x.data(), &d, stride, pad);
    let row = d.c_in * d.k;
    let wt = transpose(d.c_out, row, w.data());
    let mut out_t = vec![T::zero(); d.batch * d.l_out * d.c_out];
    gemm_acc(d.batch * d.l_out, row, d.c_out, &cols, &wt, &mut out_t);
    let mut out = vec![T::zero(); d.batch * d.c_out * d.l_out];
    for b in 0..d.batch {
        let t = transpose(
            d.l_out,
            d.c_out,
            &out_t[b * d.l_out * d.c_out..(b + 1) * d.l_out * d.c_out],
        );
        out[b * d.c_out * d.l_out..(b + 1) * d.c_out * d.l_out].copy_from_slice(&t);
    }
    Ok((Tensor::new([d.batch, d.c_out, d.l_out], out)?, cols))
}

fn group_norm_fwd<T: Scalar>(
    x: &Tensor<T>,
    groups: usize,
    eps: f64,
    node: usize,
) -> Result<(Tensor<T>, Vec<T>)> {
    let s = x.shape();
    if s.len() != 3 || groups == 0 || s[1] % groups != 0 {
        return Err(Error::shape(
            "group_norm",
            node,
            format!("{s:?} with {groups} groups"),
        ));
    }
    let n = s[0] * groups;
    let span = s[1] / groups * s[2];
    normalize_rows(x, n, span, eps)
}

fn layer_norm_fwd<T: Scalar>(x: &Tensor<T>, eps: f64, node: usize) -> Result<(Tensor<T>, Vec<T>)> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("layer_norm", node, "rank 0"))?;
    normalize_rows(x, x.numel() / d, d, eps)
}

/// Normalizes `rows` contiguous blocks of `span` values; saves `1/σ` per row.
fn normalize_rows<T: Scalar>(
    x: &Tensor<T>,
    rows: usize,
    span: usize,
    eps: f64,
) -> Result<(Tensor<T>, Vec<T>)> {
    let mut out = vec![T::zero(); x.numel()];
    let mut rstd = Vec::with_capacity(rows);
    let inv_n = T::lit(1.0 / span as f64);
    for r in 0..rows {
        let xs = &x.data()[r * span..(r + 1) * span];
        let mean = xs.iter().copied().sum::<T>() * inv_n;
        let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_n;
        let rs = T::one() / (var + T::lit(eps)).sqrt();
        for (o, &v) in out[r * span..(r + 1) * span].iter_mut().zip(xs) {
            *o = (v - mean) * rs;
        }
        rstd.push(rs);
    }
    Ok((Tensor::new(x.shape().to_vec(), out)?, rstd))
}

fn softmax_fwd<T: Scalar>(x: &Tensor<T>, node: usize) -> Result<Tensor<T>> {
    let d = *x
        .shape()
        .last()
        .ok_or_else(|| Error::shape("softmax", node, "rank 0"))?;
    let mut out = x.data().to_vec();
    for row in out.chunks_mut(d) {
        let m = row.iter().copied().fold(T::neg_infinity(), T::max);
        let mut z = T::zero();
        for v in row.iter_mut() {
            *v = (*v - m).exp();
            z = z + *v;
        }
        for v in row.iter_mut() {
            *v = *v / z;
        }
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// tanh-approximated GELU and its derivative.
fn gelu<T: Scalar>(x: T) -> (T, T) {
    // tanh approximation; 1 + tanh(u) = 2·σ(2u)
    let c = T::lit((2.0 / std::f64::consts::PI).sqrt());
    let a = T::lit(0.044715);
    let two = T::lit(2.0);
    let u = c * (x + a * x * x * x);
    let s = T::one() / (T::one() + (-two * u).exp());
    let y = x * s;
    let du = c * (T::one() + T::lit(3.0) * a * x * x);
    let dy = s + two * x * s * (T::one() - s) * du;
    (y, dy)
}

/// `x·tanh(softplus(x))` and its derivative.
fn mish<T: Scalar>(x: T) -> (T, T) {
    if x > T::lit(20.0) {
        return (x, T::one());
    }
    // tanh(ln(1 + e)) = e(e + 2) / (e(e + 2) + 2)
    let e = x.exp();
    let n = e * (e + T::lit(2.0));
    let t = n / (n + T::lit(2.0));
    let sig = e / (T::one() + e);
    (x * t, t + x * (T::one() - t * t) * sig)
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (
        numel(&shape[..axis]),
        shape[axis],
        numel(&shape[axis + 1..]),
    )
}

fn mean_axis_fwd<T: Scalar>(x: &Tensor<T>, axis: usize, node: usize) -> Result<Tensor<T>> {
    if axis >= x.rank() {
        return Err(Error::shape(
            "mean",
            node,
            format!("axis {axis} of {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = vec![T::zero(); outer * inner];
    for o in 0..outer {
        let dst = &mut out[o * inner..(o + 1) * inner];
        for j in 0..n {
            let src = &x.data()[(o * n + j) * inner..(o * n + j + 1) * inner];
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = *d + s;
            }
        }
    }
    let inv = T::lit(1.0 / n as f64);
    out.iter_mut().for_each(|v| *v = *v * inv);
    let mut shape = x.shape().to_vec();
    shape.remove(axis);
    if shape.is_empty() {
        shape.push(1);
    }
    Tensor::new(shape, out)
}

fn gather_fwd<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    indices: &[usize],
    node: usize,
) -> Result<Tensor<T>> {
    if axis >= x.rank() || indices.iter().any(|&i| i >= x.shape()[axis]) {
        return Err(Error::shape(
            "gather",
            node,
            format!("indices out of range on axis {axis} of {:?}", x.shape()),
        ));
    }
    let (outer, n, inner) = axis_split(x.shape(), axis);
    let mut out = Vec::with_capacity(outer * indices.len() * inner);
    for o in 0..outer {
        for &i in indices {
            out.extend_from_slice(&x.data()[(o * n + i) * inner..(o * n + i + 1) * inner]);
        }
    }
    let mut shape = x.shape().to_vec();
    shape[axis] = indices.len();
    Tensor::new(shape, out)
}

fn concat_fwd<T: Scalar>(xs: &[&Tensor<T>], axis: usize, node: usize) -> Result<Tensor<T>> {
    let first = xs
        .first()
        .ok_or_else(|| Error::shape("concat", node, "no inputs"))?;
    if axis >= first.rank() {
        return Err(Error::shape("concat", node, format!("axis {axis}")));
    }
    for x in xs {
        let ok = x.rank() == first.rank()
            && x
                .shape()
                .iter()
                .zip(first.shape())
                .enumerate()
                .all(|(i, (a, b))| i == axis || a == b);
        if !ok {
            return Err(Error::shape(
                "concat",
                node,
                format!("{:?} vs {:?} on axis {axis}", x.shape(), first.shape()),
            ));
        }
    }
    let outer = numel(&first.shape()[..axis]);
    let inner = numel(&first.shape()[axis + 1..]);
    let total: usize = xs.iter().map(|x| x.shape()[axis]).sum();
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for x in xs {
            let n = x.shape()[axis];
            out.extend_from_slice(&x.data()[o * n * inner..(o + 1) * n * inner]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(shape, out)
}

fn permute_fwd<T: Scalar>(x: &Tensor<T>, perm: &[usize], node: usize) -> Result<Tensor<T>> {
    let r = x.rank();
    let mut seen = vec![false; r];
    if perm.len() != r || perm.iter().any(|&p| p >= r || std::mem::replace(&mut seen[p], true)) {
        return Err(Error::shape(
            "permute",
            node,
            format!("{perm:?} for {:?}", x.shape()),
        ));
    }
    let shape: Vec<usize> = perm.iter().map(|&p| x.shape()[p]).collect();
    let src_strides = strides(x.shape());
    let eff: Vec<usize> = perm.iter().map(|&p| src_strides[p]).collect();
    let mut out = Vec::with_capacity(x.numel());
    let mut idx = vec![0usize; r];
    let mut off = 0usize;
    for _ in 0..x.numel() {
        out.push(x.data()[off]);
        for ax in (0..r).rev() {
            idx[ax] += 1;
            off += eff[ax];
            if idx[ax] < shape[ax] {
                break;
            }
            off -= eff[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
    Tensor::new(shape, out)
}

// ---------------------------------------------------------------------------
// vector-Jacobian products

fn vjp<T: Scalar>(
    op: &Op,
    ins: &[&Tensor<T>],
    out: &Tensor<T>,
    saved: &[T],
    g: &Tensor<T>,
    wants: &[bool],
) -> Vec<Option<Tensor<T>>> {
    match op {
        Op::Constant | Op::Input(_) | Op::Param => Vec::new(),
        Op::MatMul => matmul_vjp(ins[0], ins[1], g, wants),
        Op::Add => {
            let ga = wants[0].then(|| g.clone());
            let gb = wants[1].then(|| reduce_to(g, ins[1].shape(), |gi, _| gi, ins[0]));
            vec![ga, gb]
        }
        Op::Sub => {
            let ga = wants[0].then(|| g.clone());
            let gb = wants[1].then(|| reduce_to(g, ins[1].shape(), |gi, _| -gi, ins[0]));
            vec![ga, gb]
        }
        Op::Mul => {
            let ga = wants[0].then(|| {
                Tensor::new(g.shape().to_vec(), broadcast_zip(g, ins[1], |gi, b| gi * b)).unwrap()
            });
            let gb = wants[1].then(|| reduce_to(g, ins[1].shape(), |gi, a| gi * a, ins[0]));
            vec![ga, gb]
        }
        Op::Scale(c) => {
            let c = T::lit(*c);
            vec![Some(g.map(|v| v * c))]
        }
        Op::AddScalar(_) => vec![Some(g.clone())],
        Op::Conv1d { stride, pad } => conv1d_vjp(ins[0], ins[1], saved, g, *stride, *pad, wants),
        Op::GroupNorm { groups, .. } => {
            let s = ins[0].shape();
            let span = s[1] / groups * s[2];
            vec![Some(normalize_rows_vjp(out, saved, g, span))]
        }
        Op::LayerNorm { .. } => {
            let d = *ins[0].shape().last().unwrap();
            vec![Some(normalize_rows_vjp(out, saved, g, d))]
        }
        Op::Softmax => {
            let d = *out.shape().last().unwrap();
            let mut gx = vec![T::zero(); out.numel()];
            for ((gr, yr), dst) in g
                .data()
                .chunks(d)
                .zip(out.data().chunks(d))
                .zip(gx.chunks_mut(d))
            {
                let dot: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                for ((o, &gi), &yi) in dst.iter_mut().zip(gr).zip(yr) {
                    *o = yi * (gi - dot);
                }
            }
            vec![Some(Tensor::new(out.shape().to_vec(), gx).unwrap())]
        }
        Op::Gelu => vec![Some(zip_map(g, ins[0], |gi, x| gi * gelu(x).1))],
        Op::Mish => vec![Some(zip_map(g, ins[0], |gi, x| gi * mish(x).1))],
        Op::Mean { axis } => {
            let (outer, n, inner) = axis_split(ins[0].shape(), *axis);
            let inv = T::lit(1.0 / n as f64);
            let mut gx = vec![T::zero(); ins[0].numel()];
            for o in 0..outer {
                let src = &g.data()[o * inner..(o + 1) * inner];
                for j in 0..n {
                    for (d, &s) in gx[(o * n + j) * inner..(o * n + j + 1) * inner]
                        .iter_mut()
                        .zip(src)
                    {
                        *d = s * inv;
                    }
                }
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), gx).unwrap())]
        }
        Op::MeanAll => {
            let v = g.data()[0] / T::lit(ins[0].numel() as f64);
            vec![Some(Tensor::full(ins[0].shape().to_vec(), v))]
        }
        Op::SumAll => vec![Some(Tensor::full(ins[0].shape().to_vec(), g.data()[0]))],
        Op::Gather { axis, indices } => {
            let (outer, n, inner) = axis_split(ins[0].shape(), *axis);
            let mut gx = vec![T::zero(); ins[0].numel()];
            let mut src = g.data().chunks(inner);
            for o in 0..outer {
                for &i in indices {
                    let s = src.next().unwrap();
                    for (d, &v) in gx[(o * n + i) * inner..(o * n + i + 1) * inner]
                        .iter_mut()
                        .zip(s)
                    {
                        *d = *d + v;
                    }
                }
            }
            vec![Some(Tensor::new(ins[0].shape().to_vec(), gx).unwrap())]
        }
        Op::Concat { axis } => {
            let outer = numel(&out.shape()[..*axis]);
            let inner = numel(&out.shape()[axis + 1..]);
            let total = out.shape()[*axis];
            let mut start = 0;
            let mut res = Vec::with_capacity(ins.len());
            for (x, &want) in ins.iter().zip(wants) {
                let n = x.shape()[*axis];
                if want {
                    let mut gx = Vec::with_capacity(x.numel());
                    for o in 0..outer {
                        let base = (o * total + start) * inner;
                        gx.extend_from_slice(&g.data()[base..base + n * inner]);
                    }
                    res.push(Some(Tensor::new(x.shape().to_vec(), gx).unwrap()));
                } else {
                    res.push(None);
                }
                start += n;
            }
            res
        }
        Op::Reshape(_) => vec![Some(g.clone().reshape(ins[0].shape().to_vec()).unwrap())],
        Op::Permute(perm) => {
            let mut inv = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            vec![Some(permute_fwd(g, &inv, 0).unwrap())]
        }
    }
}

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    Tensor::from_fn(a.shape().to_vec(), |i| f(a.data()[i], b.data()[i]))
}

/// Sums `f(g, a)` over the broadcast axes of `b_shape`.
fn reduce_to<T: Scalar>(
    g: &Tensor<T>,
    b_shape: &[usize],
    f: impl Fn(T, T) -> T,
    a: &Tensor<T>,
) -> Tensor<T> {
    if g.shape() == b_shape {
        return zip_map(g, a, f);
    }
    let (gd, ad) = (g.data(), a.data());
    let mut out = vec![T::zero(); numel(b_shape)];
    for_each_run(g.shape(), b_shape, |go, bo, len, st| {
        let gs = &gd[go..go + len];
        let xs = &ad[go..go + len];
        match st {
            0 => {
                let mut acc = T::zero();
                for (&gi, &x) in gs.iter().zip(xs) {
                    acc = acc + f(gi, x);
                }
                out[bo] = out[bo] + acc;
            }
            _ => {
                for (j, (&gi, &x)) in gs.iter().zip(xs).enumerate() {
                    let o = &mut out[bo + j * st];
                    *o = *o + f(gi, x);
                }
            }
        }
    });
    Tensor::new(b_shape.to_vec(), out).unwrap()
}

fn matmul_vjp<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    g: &Tensor<T>,
    wants: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let (batch, m, k, n, shared) = split_matmul(a.shape(), b.shape(), 0).unwrap();
    let ga = wants[0].then(|| {
        let mut ga = vec![T::zero(); a.numel()];
        if shared {
            gemm_nt_acc(batch * m, n, k, g.data(), b.data(), &mut ga);
        } else {
            for bi in 0..batch {
                gemm_nt_acc(
                    m,
                    n,
                    k,
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    &mut ga[bi * m * k..(bi + 1) * m * k],
                );
            }
        }
        Tensor::new(a.shape().to_vec(), ga).unwrap()
    });
    let gb = wants[1].then(|| {
        let mut gb = vec![T::zero(); b.numel()];
        if shared {
            gemm_tn_acc(batch * m, k, n, a.data(), g.data(), &mut gb);
        } else {
            for bi in 0..batch {
                gemm_tn_acc(
                    m,
                    k,
                    n,
                    &a.data()[bi * m * k..(bi + 1) * m * k],
                    &g.data()[bi * m * n..(bi + 1) * m * n],
                    &mut gb[bi * k * n..(bi + 1) * k * n],
                );
            }
        }
        Tensor::new(b.shape().to_vec(), gb).unwrap()
    });
    vec![ga, gb]
}

fn conv1d_vjp<T: Scalar>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    cols: &[T],
    g: &Tensor<T>,
    stride: usize,
    pad: usize,
    wants: &[bool],
) -> Vec<Option<Tensor<T>>> {
    let d = conv_dims(x.shape(), w.shape(), stride, pad, 0).unwrap();
    let row = d.c_in * d.k;
    // g: [b, c_out, l_out] -> g_t: [b·l_out, c_out]
    let mut g_t = Vec::with_capacity(g.numel());
    for b in 0..d.batch {
        g_t.extend(transpose(
            d.c_out,
            d.l_out,
            &g.data()[b * d.c_out * d.l_out..(b + 1) * d.c_out * d.l_out],
        ));
    }
    let gw = wants[1].then(|| {
        // dWᵀ[row, c_out] = colsᵀ · g_t
        let mut gwt = vec![T::zero(); row * d.c_out];
        gemm_tn_acc(d.batch * d.l_out, row, d.c_out, cols, &g_t, &mut gwt);
        Tensor::new(w.shape().to_vec(), transpose(row, d.c_out, &gwt)).unwrap()
    });
    let gx = wants[0].then(|| {
        let mut gcols = vec![T::zero(); d.batch * d.l_out * row];
        gemm_acc(d.batch * d.l_out, d.c_out, row, &g_t, w.data(), &mut gcols);
        let mut gx = vec![T::zero(); x.numel()];
        for b in 0..d.batch {
            for l in 0..d.l_out {
                let src = &gcols[(b * d.l_out + l) * row..(b * d.l_out + l + 1) * row];
                for c in 0..d.c_in {
                    for kk in 0..d.k {
                        let pos = (l * stride + kk) as isize - pad as isize;
                        if pos >= 0 && (pos as usize) < d.len {
                            let dst = &mut gx[(b * d.c_in + c) * d.len + pos as usize];
                            *dst = *dst + src[c * d.k + kk];
                        }
                    }
                }
            }
        }
        Tensor::new(x.shape().to_vec(), gx).unwrap()
    });
    vec![gx, gw]
}

fn normalize_rows_vjp<T: Scalar>(
    y: &Tensor<T>,
    rstd: &[T],
    g: &Tensor<T>,
    span: usize,
) -> Tensor<T> {
    let inv_n = T::lit(1.0 / span as f64);
    let mut gx = vec![T::zero(); y.numel()];
    for (r, &rs) in rstd.iter().enumerate() {
        let ys = &y.data()[r * span..(r + 1) * span];
        let gs = &g.data()[r * span..(r + 1) * span];
        let mean_g = gs.iter().copied().sum::<T>() * inv_n;
        let mean_gy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() * inv_n;
        for ((o, &gi), &yi) in gx[r * span..(r + 1) * span].iter_mut().zip(gs).zip(ys) {
            *o = rs * (gi - mean_g - yi * mean_gy);
        }
    }
    Tensor::new(y.shape().to_vec(), gx).unwrap()
}
