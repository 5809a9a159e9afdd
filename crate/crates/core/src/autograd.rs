//! Tape-based reverse-mode automatic differentiation over 2-D row-major
//! tensors.
//!
//! A [`Graph`] records every operation applied to its [`Var`]s; calling
//! [`Graph::backward`] walks the tape in reverse creation order. Broadcasting
//! is never implicit: the only row-wise broadcasts are [`Var::add_bias`],
//! the affine part of [`Var::layer_norm`], and the per-sequence
//! [`Var::modulate`] / [`Var::gate`] used by adaptive layer norm.

use std::cell::RefCell;
use std::rc::Rc;

use crate::error::{shape_err, Error, Result};
use crate::nn::attention;
use crate::nn::mask::AttentionMask;
use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, Element, MatView, MatViewMut, Tensor};

pub(crate) const LN_EPS: f64 = 1e-6;

#[derive(Debug)]
enum Op<E> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, E),
    AddBias(usize, usize),
    MatMul(usize, usize),
    Gelu(usize),
    Silu(usize),
    Sin(usize),
    LayerNorm {
        x: usize,
        affine: Option<(usize, usize)>,
        xhat: Vec<E>,
        rstd: Vec<E>,
    },
    Modulate {
        x: usize,
        shift: usize,
        scale: usize,
        seq: usize,
    },
    Gate {
        x: usize,
        gate: usize,
        seq: usize,
    },
    Attention {
        q: usize,
        k: usize,
        v: usize,
        heads: usize,
        seq: usize,
        probs: Vec<E>,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    SliceCols {
        x: usize,
        start: usize,
    },
    Reshape(usize),
    Sum(usize),
    Mean(usize),
}

struct Node<E> {
    value: Rc<Tensor<E>>,
    op: Op<E>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Operation tape. Create one per forward pass.
pub struct Graph<E: Element> {
    nodes: RefCell<Vec<Node<E>>>,
}

impl<E: Element> Default for Graph<E> {
    fn default() -> Self {
        Self::new()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy)]
pub struct Var<'g, E: Element> {
    graph: &'g Graph<E>,
    id: usize,
}

impl<E: Element> std::fmt::Debug for Var<'_, E> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "Var#{}{:?}", self.id, self.value().shape())
    }
}

/// Parameters bound as leaves of one graph, indexed by [`ParamId`].
pub struct BoundParams<'g, E: Element> {
    vars: Vec<Var<'g, E>>,
}

impl<'g, E: Element> std::ops::Index<ParamId> for BoundParams<'g, E> {
    type Output = Var<'g, E>;
    fn index(&self, id: ParamId) -> &Self::Output {
        &self.vars[id.0]
    }
}

impl<'g, E: Element> BoundParams<'g, E> {
    pub fn get(&self, id: ParamId) -> Var<'g, E> {
        self.vars[id.0]
    }
}

impl<E: Element> Graph<E> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor<E>, op: Op<E>, requires_grad: bool, param: Option<ParamId>) -> Var<'_, E> {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value: Rc::new(value),
            op,
            requires_grad,
            param,
        });
        Var {
            graph: self,
            id: nodes.len() - 1,
        }
    }

    /// A differentiable input.
    pub fn leaf(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, true, None)
    }

    /// A non-differentiable input (data, noise, timestep features).
    pub fn constant(&self, value: Tensor<E>) -> Var<'_, E> {
        self.push(value, Op::Leaf, false, None)
    }

    /// Bind every parameter of `store` as a differentiable leaf.
    pub fn bind(&self, store: &ParamStore<E>) -> BoundParams<'_, E> {
        let vars = store
            .iter()
            .map(|(id, p)| self.push(p.value.clone(), Op::Leaf, true, Some(id)))
            .collect();
        BoundParams { vars }
    }

    fn value_of(&self, id: usize) -> Rc<Tensor<E>> {
        self.nodes.borrow()[id].value.clone()
    }

    fn requires(&self, id: usize) -> bool {
        self.nodes.borrow()[id].requires_grad
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var<'_, E>) -> Result<Gradients<E>> {
        let nodes = self.nodes.borrow();
        let out = &nodes[output.id];
        if out.value.len() != 1 {
            return Err(shape_err(
                "backward",
                format!("output must be a scalar, got {:?}", out.value.shape()),
            ));
        }
        if !out.value.all_finite() {
            return Err(Error::NonFiniteObjective);
        }
        let mut grads: Vec<Option<Tensor<E>>> = (0..=output.id).map(|_| None).collect();
        grads[output.id] = Some(Tensor::full(out.value.shape(), E::one()));
        for id in (0..=output.id).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backward_node(&nodes, node, &g, &mut grads);
            grads[id] = Some(g);
        }
        let params = nodes[..=output.id]
            .iter()
            .zip(grads.iter_mut())
            .filter_map(|(n, g)| n.param.map(|p| (p, g.clone())))
            .collect();
        Ok(Gradients { grads, params })
    }
}

/// Result of a backward sweep.
pub struct Gradients<E> {
    grads: Vec<Option<Tensor<E>>>,
    params: Vec<(ParamId, Option<Tensor<E>>)>,
}

impl<E: Element> Gradients<E> {
    /// Gradient with respect to `var`, `None` if it does not influence the output.
    pub fn get(&self, var: Var<'_, E>) -> Option<&Tensor<E>> {
        self.grads.get(var.id).and_then(|g| g.as_ref())
    }

    /// Add every parameter gradient into `store`'s gradient buffers.
    pub fn accumulate_into(self, store: &mut ParamStore<E>) {
        for (id, g) in self.params {
            if let Some(g) = g {
                store.get_mut(id).grad.add_assign(&g).expect("gradient shape equals value shape");
            }
        }
    }
}

fn acc<'a, E: Element>(grads: &'a mut [Option<Tensor<E>>], id: usize, shape: &[usize]) -> &'a mut Tensor<E> {
    grads[id].get_or_insert_with(|| Tensor::zeros(shape))
}

fn acc_with<E: Element>(
    nodes: &[Node<E>],
    grads: &mut [Option<Tensor<E>>],
    id: usize,
    f: impl Fn(usize, E) -> E,
) {
    if !nodes[id].requires_grad {
        return;
    }
    let t = acc(grads, id, nodes[id].value.shape());
    for (i, v) in t.data_mut().iter_mut().enumerate() {
        *v = f(i, *v);
    }
}

fn gelu_parts(x: f64) -> (f64, f64) {
    const C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
    let u = C * (x + 0.044715 * x * x * x);
    let th = u.tanh();
    let y = 0.5 * x * (1.0 + th);
    let du = C * (1.0 + 3.0 * 0.044715 * x * x);
    let dy = 0.5 * (1.0 + th) + 0.5 * x * (1.0 - th * th) * du;
    (y, dy)
}

fn backward_node<E: Element>(nodes: &[Node<E>], node: &Node<E>, g: &Tensor<E>, grads: &mut [Option<Tensor<E>>]) {
    let gd = g.data();
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc_with(nodes, grads, *a, |i, v| v + gd[i]);
            acc_with(nodes, grads, *b, |i, v| v + gd[i]);
        }
        Op::Sub(a, b) => {
            acc_with(nodes, grads, *a, |i, v| v + gd[i]);
            acc_with(nodes, grads, *b, |i, v| v - gd[i]);
        }
        Op::Mul(a, b) => {
            let (av, bv) = (nodes[*a].value.clone(), nodes[*b].value.clone());
            acc_with(nodes, grads, *a, |i, v| v + gd[i] * bv.data()[i]);
            acc_with(nodes, grads, *b, |i, v| v + gd[i] * av.data()[i]);
        }
        Op::Scale(a, c) => acc_with(nodes, grads, *a, |i, v| v + gd[i] * *c),
        Op::AddBias(x, b) => {
            acc_with(nodes, grads, *x, |i, v| v + gd[i]);
            if nodes[*b].requires_grad {
                let n = g.cols();
                let gb = acc(grads, *b, nodes[*b].value.shape());
                for row in gd.chunks_exact(n) {
                    for (o, &r) in gb.data_mut().iter_mut().zip(row) {
                        *o += r;
                    }
                }
            }
        }
        Op::MatMul(a, b) => {
            let av = nodes[*a].value.clone();
            let bv = nodes[*b].value.clone();
            let (m, k) = (av.rows(), av.cols());
            let n = bv.cols();
            if nodes[*a].requires_grad {
                let ga = acc(grads, *a, av.shape());
                gemm(
                    E::one(),
                    MatView::new(gd, m, n),
                    MatView::new(bv.data(), k, n).t(),
                    E::one(),
                    MatViewMut::new(ga.data_mut(), m, k),
                );
            }
            if nodes[*b].requires_grad {
                let gb = acc(grads, *b, bv.shape());
                gemm(
                    E::one(),
                    MatView::new(av.data(), m, k).t(),
                    MatView::new(gd, m, n),
                    E::one(),
                    MatViewMut::new(gb.data_mut(), k, n),
                );
            }
        }
        Op::Gelu(x) => {
            let xv = nodes[*x].value.clone();
            acc_with(nodes, grads, *x, |i, v| {
                v + gd[i] * E::from_f64(gelu_parts(xv.data()[i].as_f64()).1)
            });
        }
        Op::Silu(x) => {
            let xv = nodes[*x].value.clone();
            acc_with(nodes, grads, *x, |i, v| {
                let xi = xv.data()[i];
                let s = E::one() / (E::one() + (-xi).exp());
                v + gd[i] * s * (E::one() + xi * (E::one() - s))
            });
        }
        Op::Sin(x) => {
            let xv = nodes[*x].value.clone();
            acc_with(nodes, grads, *x, |i, v| v + gd[i] * xv.data()[i].cos());
        }
        Op::LayerNorm { x, affine, xhat, rstd } => {
            let n = g.cols();
            let gamma = affine.map(|(gm, _)| nodes[gm].value.clone());
            if let Some((gm, bt)) = affine {
                if nodes[*gm].requires_grad {
                    let gg = acc(grads, *gm, &[n]);
                    for (row, xr) in gd.chunks_exact(n).zip(xhat.chunks_exact(n)) {
                        for ((o, &r), &xh) in gg.data_mut().iter_mut().zip(row).zip(xr) {
                            *o += r * xh;
                        }
                    }
                }
                if nodes[*bt].requires_grad {
                    let gb = acc(grads, *bt, &[n]);
                    for row in gd.chunks_exact(n) {
                        for (o, &r) in gb.data_mut().iter_mut().zip(row) {
                            *o += r;
                        }
                    }
                }
            }
            if nodes[*x].requires_grad {
                let nf = E::from_f64(n as f64);
                let gx = acc(grads, *x, nodes[*x].value.shape());
                let mut gxh = vec![E::zero(); n];
                for (r, ((grow, xr), out)) in gd
                    .chunks_exact(n)
                    .zip(xhat.chunks_exact(n))
                    .zip(gx.data_mut().chunks_exact_mut(n))
                    .enumerate()
                {
                    for j in 0..n {
                        gxh[j] = match &gamma {
                            Some(gm) => grow[j] * gm.data()[j],
                            None => grow[j],
                        };
                    }
                    let mean_g = gxh.iter().copied().sum::<E>() / nf;
                    let mean_gx = gxh.iter().zip(xr).map(|(&a, &b)| a * b).sum::<E>() / nf;
                    for j in 0..n {
                        out[j] += rstd[r] * (gxh[j] - mean_g - xr[j] * mean_gx);
                    }
                }
            }
        }
        Op::Modulate { x, shift, scale, seq } => {
            let w = g.cols();
            let xv = nodes[*x].value.clone();
            let sv = nodes[*scale].value.clone();
            acc_with(nodes, grads, *x, |i, v| {
                let b = i / w / seq;
                v + gd[i] * (E::one() + sv.data()[b * w + i % w])
            });
            acc_with(nodes, grads, *shift, |i, v| {
                let (b, j) = (i / w, i % w);
                v + (0..*seq).map(|t| gd[(b * seq + t) * w + j]).sum::<E>()
            });
            acc_with(nodes, grads, *scale, |i, v| {
                let (b, j) = (i / w, i % w);
                v + (0..*seq)
                    .map(|t| {
                        let r = (b * seq + t) * w + j;
                        gd[r] * xv.data()[r]
                    })
                    .sum::<E>()
            });
        }
        Op::Gate { x, gate, seq } => {
            let w = g.cols();
            let xv = nodes[*x].value.clone();
            let gv = nodes[*gate].value.clone();
            acc_with(nodes, grads, *x, |i, v| v + gd[i] * gv.data()[(i / w / seq) * w + i % w]);
            acc_with(nodes, grads, *gate, |i, v| {
                let (b, j) = (i / w, i % w);
                v + (0..*seq)
                    .map(|t| {
                        let r = (b * seq + t) * w + j;
                        gd[r] * xv.data()[r]
                    })
                    .sum::<E>()
            });
        }
        Op::Attention {
            q,
            k,
            v,
            heads,
            seq,
            probs,
        } => {
            let (qv, kv, vv) = (
                nodes[*q].value.clone(),
                nodes[*k].value.clone(),
                nodes[*v].value.clone(),
            );
            let (dq, dk, dv) = attention::backward(&qv, &kv, &vv, probs, gd, *heads, *seq);
            acc_with(nodes, grads, *q, |i, x| x + dq[i]);
            acc_with(nodes, grads, *k, |i, x| x + dk[i]);
            acc_with(nodes, grads, *v, |i, x| x + dv[i]);
        }
        Op::GatherRows { x, idx } => {
            if nodes[*x].requires_grad {
                let c = g.cols();
                let gx = acc(grads, *x, nodes[*x].value.shape());
                for (dst, src) in idx.iter().zip(gd.chunks_exact(c)) {
                    for (o, &s) in gx.data_mut()[dst * c..(dst + 1) * c].iter_mut().zip(src) {
                        *o += s;
                    }
                }
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p].value.len();
                acc_with(nodes, grads, p, |i, v| v + gd[offset + i]);
                offset += len;
            }
        }
        Op::SliceCols { x, start } => {
            let (c_out, c_in) = (g.cols(), nodes[*x].value.cols());
            acc_with(nodes, grads, *x, |i, v| {
                let (r, j) = (i / c_in, i % c_in);
                if j >= *start && j < start + c_out {
                    v + gd[r * c_out + j - start]
                } else {
                    v
                }
            });
        }
        Op::Reshape(x) => acc_with(nodes, grads, *x, |i, v| v + gd[i]),
        Op::Sum(x) => {
            let s = gd[0];
            acc_with(nodes, grads, *x, |_, v| v + s);
        }
        Op::Mean(x) => {
            let s = gd[0] / E::from_f64(nodes[*x].value.len() as f64);
            acc_with(nodes, grads, *x, |_, v| v + s);
        }
    }
}

impl<'g, E: Element> Var<'g, E> {
    pub fn graph(&self) -> &'g Graph<E> {
        self.graph
    }

    pub fn value(&self) -> Rc<Tensor<E>> {
        self.graph.value_of(self.id)
    }

    pub fn shape(&self) -> Vec<usize> {
        self.value().shape().to_vec()
    }

    fn same_graph(&self, other: &Var<'g, E>, op: &'static str) -> Result<()> {
        if !std::ptr::eq(self.graph, other.graph) {
            return Err(Error::InvalidArgument(format!("{op}: operands on different graphs")));
        }
        Ok(())
    }

    fn unary(&self, value: Tensor<E>, op: Op<E>) -> Var<'g, E> {
        let rg = self.graph.requires(self.id);
        self.graph.push(value, op, rg, None)
    }

    fn nary(&self, ids: &[usize], value: Tensor<E>, op: Op<E>) -> Var<'g, E> {
        let rg = ids.iter().any(|&i| self.graph.requires(i));
        self.graph.push(value, op, rg, None)
    }

    fn elementwise(&self, other: &Var<'g, E>, name: &'static str, op: Op<E>, f: impl Fn(E, E) -> E) -> Result<Var<'g, E>> {
        self.same_graph(other, name)?;
        let value = self.value().zip_map(&other.value(), name, f)?;
        Ok(self.nary(&[self.id, other.id], value, op))
    }

    pub fn add(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.elementwise(other, "add", Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.elementwise(other, "sub", Op::Sub(self.id, other.id), |a, b| a - b)
    }

    pub fn mul(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.elementwise(other, "mul", Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn scale(&self, c: f64) -> Var<'g, E> {
        let c = E::from_f64(c);
        self.unary(self.value().scale(c), Op::Scale(self.id, c))
    }

    /// Row-wise bias: `x[m, n] + b[n]`.
    pub fn add_bias(&self, bias: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.same_graph(bias, "add_bias")?;
        let x = self.value();
        let b = bias.value();
        let (_, n) = x.expect_2d("add_bias")?;
        if b.shape() != [n] {
            return Err(shape_err("add_bias", format!("{:?} + {:?}", x.shape(), b.shape())));
        }
        let mut out = x.data().to_vec();
        for row in out.chunks_exact_mut(n) {
            for (o, &bb) in row.iter_mut().zip(b.data()) {
                *o += bb;
            }
        }
        let value = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.nary(&[self.id, bias.id], value, Op::AddBias(self.id, bias.id)))
    }

    pub fn matmul(&self, other: &Var<'g, E>) -> Result<Var<'g, E>> {
        self.same_graph(other, "matmul")?;
        let value = self.value().matmul(&other.value())?;
        Ok(self.nary(&[self.id, other.id], value, Op::MatMul(self.id, other.id)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&self) -> Var<'g, E> {
        let v = self.value().map(|x| E::from_f64(gelu_parts(x.as_f64()).0));
        self.unary(v, Op::Gelu(self.id))
    }

    pub fn silu(&self) -> Var<'g, E> {
        let v = self.value().map(|x| x / (E::one() + (-x).exp()));
        self.unary(v, Op::Silu(self.id))
    }

    pub fn sin(&self) -> Var<'g, E> {
        let v = self.value().map(|x| x.sin());
        self.unary(v, Op::Sin(self.id))
    }

    /// Normalize each row to zero mean and unit variance, then optionally
    /// apply `gamma[n]` and `beta[n]` row-wise.
    pub fn layer_norm(&self, affine: Option<(&Var<'g, E>, &Var<'g, E>)>) -> Result<Var<'g, E>> {
        let x = self.value();
        let (m, n) = x.expect_2d("layer_norm")?;
        let mut ids = vec![self.id];
        let affine_vals = match affine {
            Some((gm, bt)) => {
                self.same_graph(gm, "layer_norm")?;
                self.same_graph(bt, "layer_norm")?;
                let (gv, bv) = (gm.value(), bt.value());
                if gv.shape() != [n] || bv.shape() != [n] {
                    return Err(shape_err(
                        "layer_norm",
                        format!("affine {:?}/{:?} for width {n}", gv.shape(), bv.shape()),
                    ));
                }
                ids.extend([gm.id, bt.id]);
                Some((gv, bv))
            }
            None => None,
        };
        let nf = E::from_f64(n as f64);
        let eps = E::from_f64(LN_EPS);
        let mut xhat = vec![E::zero(); m * n];
        let mut rstd = vec![E::zero(); m];
        let mut out = vec![E::zero(); m * n];
        for r in 0..m {
            let row = &x.data()[r * n..(r + 1) * n];
            let mean = row.iter().copied().sum::<E>() / nf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<E>() / nf;
            let rs = E::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..n {
                let xh = (row[j] - mean) * rs;
                xhat[r * n + j] = xh;
                out[r * n + j] = match &affine_vals {
                    Some((gv, bv)) => xh * gv.data()[j] + bv.data()[j],
                    None => xh,
                };
            }
        }
        let value = Tensor::from_parts(vec![m, n], out);
        let op = Op::LayerNorm {
            x: self.id,
            affine: affine.map(|(gm, bt)| (gm.id, bt.id)),
            xhat,
            rstd,
        };
        Ok(self.nary(&ids, value, op))
    }

    fn check_per_sequence(&self, other: &Var<'g, E>, seq: usize, op: &'static str) -> Result<usize> {
        self.same_graph(other, op)?;
        let (rows, w) = self.value().expect_2d(op)?;
        let (b, w2) = other.value().expect_2d(op)?;
        if seq == 0 || w != w2 || b * seq != rows {
            return Err(shape_err(
                op,
                format!("x [{rows}, {w}] with per-sequence [{b}, {w2}] at sequence length {seq}"),
            ));
        }
        Ok(w)
    }

    /// Adaptive layer-norm modulation: `x * (1 + scale_b) + shift_b`, where
    /// row `r` of `x` belongs to sequence `b = r / seq`.
    pub fn modulate(&self, shift: &Var<'g, E>, scale: &Var<'g, E>, seq: usize) -> Result<Var<'g, E>> {
        let w = self.check_per_sequence(shift, seq, "modulate")?;
        self.check_per_sequence(scale, seq, "modulate")?;
        let (x, sh, sc) = (self.value(), shift.value(), scale.value());
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| {
                let p = (i / w / seq) * w + i % w;
                v * (E::one() + sc.data()[p]) + sh.data()[p]
            })
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        let op = Op::Modulate {
            x: self.id,
            shift: shift.id,
            scale: scale.id,
            seq,
        };
        Ok(self.nary(&[self.id, shift.id, scale.id], value, op))
    }

    /// Per-sequence gating: `x * gate_b`.
    pub fn gate(&self, gate: &Var<'g, E>, seq: usize) -> Result<Var<'g, E>> {
        let w = self.check_per_sequence(gate, seq, "gate")?;
        let (x, gv) = (self.value(), gate.value());
        let data = x
            .data()
            .iter()
            .enumerate()
            .map(|(i, &v)| v * gv.data()[(i / w / seq) * w + i % w])
            .collect();
        let value = Tensor::from_parts(x.shape().to_vec(), data);
        Ok(self.nary(
            &[self.id, gate.id],
            value,
            Op::Gate {
                x: self.id,
                gate: gate.id,
                seq,
            },
        ))
    }

    /// Masked multi-head scaled-dot-product attention over `rows / seq`
    /// independent sequences sharing one mask.
    pub fn attention(&self, k: &Var<'g, E>, v: &Var<'g, E>, mask: &AttentionMask, heads: usize) -> Result<Var<'g, E>> {
        self.same_graph(k, "attention")?;
        self.same_graph(v, "attention")?;
        let (qv, kv, vv) = (self.value(), k.value(), v.value());
        let seq = mask.size();
        let (out, probs) = attention::forward(&qv, &kv, &vv, mask, heads)?;
        let op = Op::Attention {
            q: self.id,
            k: k.id,
            v: v.id,
            heads,
            seq,
            probs,
        };
        Ok(self.nary(&[self.id, k.id, v.id], out, op))
    }

    /// Output row `i` is input row `idx[i]`. Rows may repeat.
    pub fn gather_rows(&self, idx: &[usize]) -> Result<Var<'g, E>> {
        let x = self.value();
        let (r, c) = x.expect_2d("gather_rows")?;
        if idx.is_empty() {
            return Err(shape_err("gather_rows", "empty index list"));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err("gather_rows", format!("row {bad} of {r}")));
        }
        let mut data = Vec::with_capacity(idx.len() * c);
        for &i in idx {
            data.extend_from_slice(&x.data()[i * c..(i + 1) * c]);
        }
        let value = Tensor::from_parts(vec![idx.len(), c], data);
        Ok(self.unary(value, Op::GatherRows { x: self.id, idx: idx.to_vec() }))
    }

    pub fn slice_rows(&self, start: usize, count: usize) -> Result<Var<'g, E>> {
        let idx: Vec<usize> = (start..start + count).collect();
        self.gather_rows(&idx)
    }

    /// Columns `[start, start + len)`.
    pub fn slice_cols(&self, start: usize, len: usize) -> Result<Var<'g, E>> {
        let x = self.value();
        let (r, c) = x.expect_2d("slice_cols")?;
        if len == 0 || start + len > c {
            return Err(shape_err("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let mut data = Vec::with_capacity(r * len);
        for row in x.data().chunks_exact(c) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let value = Tensor::from_parts(vec![r, len], data);
        Ok(self.unary(value, Op::SliceCols { x: self.id, start }))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'g, E>> {
        let value = (*self.value()).clone().reshape(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn sum(&self) -> Var<'g, E> {
        let v = Tensor::scalar(self.value().sum());
        self.unary(v, Op::Sum(self.id))
    }

    pub fn mean(&self) -> Var<'g, E> {
        let v = Tensor::scalar(self.value().mean());
        self.unary(v, Op::Mean(self.id))
    }

    /// Mean over elements of `(self - target)^2`.
    pub fn mse(&self, target: &Var<'g, E>) -> Result<Var<'g, E>> {
        let d = self.sub(target)?;
        Ok(d.mul(&d)?.mean())
    }
}

/// Stack matrices vertically.
pub fn concat_rows<'g, E: Element>(parts: &[Var<'g, E>]) -> Result<Var<'g, E>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat_rows of nothing".into()))?;
    for p in parts {
        first.same_graph(p, "concat_rows")?;
    }
    let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
    let refs: Vec<&Tensor<E>> = values.iter().map(|v| v.as_ref()).collect();
    let value = Tensor::concat_rows(&refs)?;
    let ids: Vec<usize> = parts.iter().map(|p| p.id).collect();
    Ok(first.nary(&ids, value, Op::ConcatRows(ids.clone())))
}
