//! Dense f64 tensors with reverse-mode automatic differentiation.
//!
//! Operations build a define-by-run graph: each result remembers the tensors
//! it was computed from together with a closure that routes its output
//! gradient back to them. [`backward`] walks that graph from a scalar loss and
//! accumulates gradients into every reachable tensor created with
//! [`Tensor::param`].
//!
//! Tensors are immutable after construction except for gradient accumulation;
//! a graph and its tensors belong to one thread at a time. Graphs over
//! constants only (no `param` ancestors) record nothing, so inference-style
//! evaluation carries no tape overhead.

use std::cell::RefCell;
use std::collections::HashSet;
use std::rc::Rc;
use std::sync::atomic::{AtomicUsize, Ordering};

use crate::error::{Error, Result};

static NEXT_ID: AtomicUsize = AtomicUsize::new(0);

type BackwardFn = Box<dyn Fn(&[f64])>;

struct Node {
    id: usize,
    data: Vec<f64>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: RefCell<Option<Vec<f64>>>,
    /// Grad-requiring ancestors, kept for traversal order. Data-only operands
    /// are captured by the backward closure instead.
    parents: Vec<Tensor>,
    backward: Option<BackwardFn>,
}

/// Multi-dimensional array of f64 in row-major order, cheap to clone.
#[derive(Clone)]
pub struct Tensor {
    node: Rc<Node>,
}

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(
            f,
            "Tensor(shape={:?}, requires_grad={})",
            self.shape(),
            self.requires_grad()
        )
    }
}

fn numel_of(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    fn leaf(data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Tensor {
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                shape,
                requires_grad,
                grad: RefCell::new(None),
                parents: Vec::new(),
                backward: None,
            }),
        }
    }

    /// Result of an operation. Collapses to a plain constant when no operand
    /// requires gradients.
    fn op(data: Vec<f64>, shape: Vec<usize>, parents: Vec<Tensor>, backward: BackwardFn) -> Tensor {
        let parents: Vec<Tensor> = parents
            .into_iter()
            .filter(|p| p.node.requires_grad)
            .collect();
        if parents.is_empty() {
            return Tensor::leaf(data, shape, false);
        }
        Tensor {
            node: Rc::new(Node {
                id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
                data,
                shape,
                requires_grad: true,
                grad: RefCell::new(None),
                parents,
                backward: Some(backward),
            }),
        }
    }

    /// Constant tensor from row-major data.
    pub fn from_vec(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::Validation(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), false))
    }

    /// Trainable leaf: gradients accumulate here during [`backward`].
    pub fn param(data: Vec<f64>, shape: &[usize]) -> Result<Tensor> {
        if data.len() != numel_of(shape) {
            return Err(Error::Validation(format!(
                "data length {} does not match shape {:?}",
                data.len(),
                shape
            )));
        }
        Ok(Tensor::leaf(data, shape.to_vec(), true))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::leaf(vec![v], vec![], false)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::leaf(vec![0.0; numel_of(shape)], shape.to_vec(), false)
    }

    pub fn shape(&self) -> &[usize] {
        &self.node.shape
    }

    pub fn numel(&self) -> usize {
        self.node.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.node.data
    }

    pub fn requires_grad(&self) -> bool {
        self.node.requires_grad
    }

    /// Accumulated gradient, if any backward pass has reached this tensor.
    pub fn grad(&self) -> Option<Vec<f64>> {
        self.node.grad.borrow().clone()
    }

    /// Value of a scalar (or single-element) tensor.
    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(Error::Usage(format!(
                "item() requires a scalar tensor, got shape {:?}",
                self.shape()
            )));
        }
        Ok(self.node.data[0])
    }

    /// Cuts the tensor out of the graph: same values, no history, no grad.
    pub fn detach(&self) -> Tensor {
        Tensor::leaf(self.node.data.clone(), self.node.shape.clone(), false)
    }

    // ---- elementwise ----

    /// Elementwise sum. `rhs` may also be a suffix shape of `self` (a bias
    /// row broadcast over leading dimensions).
    pub fn add(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() == rhs.shape() {
            let data: Vec<f64> = self
                .data()
                .iter()
                .zip(rhs.data())
                .map(|(a, b)| a + b)
                .collect();
            let (pa, pb) = (self.clone(), rhs.clone());
            return Ok(Tensor::op(
                data,
                self.node.shape.clone(),
                vec![self.clone(), rhs.clone()],
                Box::new(move |g| {
                    accumulate(&pa, g);
                    accumulate(&pb, g);
                }),
            ));
        }
        let (big, small) = (self.shape(), rhs.shape());
        if !is_suffix(small, big) {
            return Err(Error::Dimension {
                op: "add",
                lhs: big.to_vec(),
                rhs: small.to_vec(),
            });
        }
        let stride = numel_of(small);
        let data: Vec<f64> = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, a)| a + rhs.data()[i % stride])
            .collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            data,
            self.node.shape.clone(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                accumulate(&pa, g);
                if pb.node.requires_grad {
                    let mut gb = vec![0.0; stride];
                    for (i, v) in g.iter().enumerate() {
                        gb[i % stride] += v;
                    }
                    accumulate(&pb, &gb);
                }
            }),
        ))
    }

    pub fn sub(&self, rhs: &Tensor) -> Result<Tensor> {
        self.add(&rhs.neg())
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&self, rhs: &Tensor) -> Result<Tensor> {
        if self.shape() != rhs.shape() {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape().to_vec(),
                rhs: rhs.shape().to_vec(),
            });
        }
        let data: Vec<f64> = self
            .data()
            .iter()
            .zip(rhs.data())
            .map(|(a, b)| a * b)
            .collect();
        let (pa, pb) = (self.clone(), rhs.clone());
        Ok(Tensor::op(
            data,
            self.node.shape.clone(),
            vec![self.clone(), rhs.clone()],
            Box::new(move |g| {
                if pa.node.requires_grad {
                    let ga: Vec<f64> = g.iter().zip(pb.data()).map(|(g, b)| g * b).collect();
                    accumulate(&pa, &ga);
                }
                if pb.node.requires_grad {
                    let gb: Vec<f64> = g.iter().zip(pa.data()).map(|(g, a)| g * a).collect();
                    accumulate(&pb, &gb);
                }
            }),
        ))
    }

    pub fn neg(&self) -> Tensor {
        self.mul_scalar(-1.0)
    }

    pub fn mul_scalar(&self, c: f64) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|a| a * c).collect();
        let p = self.clone();
        Tensor::op(
            data,
            self.node.shape.clone(),
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g.iter().map(|g| g * c).collect();
                accumulate(&p, &gp);
            }),
        )
    }

    pub fn relu(&self) -> Tensor {
        let data: Vec<f64> = self.data().iter().map(|&a| a.max(0.0)).collect();
        let p = self.clone();
        Tensor::op(
            data,
            self.node.shape.clone(),
            vec![self.clone()],
            Box::new(move |g| {
                let gp: Vec<f64> = g
                    .iter()
                    .zip(p.data())
                    .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                    .collect();
                accumulate(&p, &gp);
            }),
        )
    }

    // ---- structural ----

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if numel_of(shape) != self.numel() {
            return Err(Error::Dimension {
                op: "reshape",
                lhs: self.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let p = self.clone();
        Ok(Tensor::op(
            self.node.data.clone(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(move |g| accumulate(&p, g)),
        ))
    }

    /// Reorders axes; `axes` must be a permutation of `0..ndim`.
    pub fn permute(&self, axes: &[usize]) -> Result<Tensor> {
        let nd = self.shape().len();
        let mut seen = vec![false; nd];
        if axes.len() != nd || axes.iter().any(|&a| a >= nd || std::mem::replace(&mut seen[a], true)) {
            return Err(Error::Usage(format!(
                "permute axes {:?} invalid for shape {:?}",
                axes,
                self.shape()
            )));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| self.shape()[a]).collect();
        let data = permute_data(self.data(), self.shape(), axes);
        let p = self.clone();
        let inverse: Vec<usize> = {
            let mut inv = vec![0; nd];
            for (i, &a) in axes.iter().enumerate() {
                inv[a] = i;
            }
            inv
        };
        let out_shape_b = out_shape.clone();
        Ok(Tensor::op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                let gp = permute_data(g, &out_shape_b, &inverse);
                accumulate(&p, &gp);
            }),
        ))
    }

    /// Contiguous sub-range along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Usage(format!(
                "narrow(axis={axis}, start={start}, len={len}) out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * shape[axis] * inner + start * inner;
            data.extend_from_slice(&self.data()[base..base + len * inner]);
        }
        let p = self.clone();
        let axis_len = shape[axis];
        Ok(Tensor::op(
            data,
            out_shape,
            vec![self.clone()],
            Box::new(move |g| {
                if !p.node.requires_grad {
                    return;
                }
                let mut gp = vec![0.0; p.numel()];
                for o in 0..outer {
                    let src = o * len * inner;
                    let dst = o * axis_len * inner + start * inner;
                    gp[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                accumulate(&p, &gp);
            }),
        ))
    }

    /// Stacks `k` copies of a vector `(L,)` into `(k, L)` rows.
    pub fn tile_rows(&self, k: usize) -> Result<Tensor> {
        if self.shape().len() != 1 {
            return Err(Error::Usage(format!(
                "tile_rows requires a 1-D tensor, got {:?}",
                self.shape()
            )));
        }
        let l = self.shape()[0];
        let mut data = Vec::with_capacity(k * l);
        for _ in 0..k {
            data.extend_from_slice(self.data());
        }
        let p = self.clone();
        Ok(Tensor::op(
            data,
            vec![k, l],
            vec![self.clone()],
            Box::new(move |g| {
                let mut gp = vec![0.0; l];
                for row in g.chunks_exact(l) {
                    for (a, b) in gp.iter_mut().zip(row) {
                        *a += b;
                    }
                }
                accumulate(&p, &gp);
            }),
        ))
    }

    /// Concatenates tensors along `axis`; all other dimensions must agree.
    pub fn concat(tensors: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = tensors
            .first()
            .ok_or_else(|| Error::Validation("concat of empty tensor list".into()))?;
        let nd = first.shape().len();
        if axis >= nd {
            return Err(Error::Usage(format!(
                "concat axis {axis} out of range for shape {:?}",
                first.shape()
            )));
        }
        for t in tensors {
            if t.shape().len() != nd
                || (0..nd).any(|d| d != axis && t.shape()[d] != first.shape()[d])
            {
                return Err(Error::Dimension {
                    op: "concat",
                    lhs: first.shape().to_vec(),
                    rhs: t.shape().to_vec(),
                });
            }
        }
        let outer: usize = first.shape()[..axis].iter().product();
        let inner: usize = first.shape()[axis + 1..].iter().product();
        let total_axis: usize = tensors.iter().map(|t| t.shape()[axis]).sum();
        let mut out_shape = first.shape().to_vec();
        out_shape[axis] = total_axis;
        let mut data = Vec::with_capacity(outer * total_axis * inner);
        for o in 0..outer {
            for t in tensors {
                let ax = t.shape()[axis];
                let base = o * ax * inner;
                data.extend_from_slice(&t.data()[base..base + ax * inner]);
            }
        }
        let parts: Vec<Tensor> = tensors.to_vec();
        let axis_lens: Vec<usize> = tensors.iter().map(|t| t.shape()[axis]).collect();
        Ok(Tensor::op(
            data,
            out_shape,
            tensors.to_vec(),
            Box::new(move |g| {
                for (ti, t) in parts.iter().enumerate() {
                    if !t.node.requires_grad {
                        continue;
                    }
                    let ax = axis_lens[ti];
                    let before: usize = axis_lens[..ti].iter().sum();
                    let mut gp = vec![0.0; t.numel()];
                    for o in 0..outer {
                        let src = (o * total_axis + before) * inner;
                        let dst = o * ax * inner;
                        gp[dst..dst + ax * inner].copy_from_slice(&g[src..src + ax * inner]);
                    }
                    accumulate(t, &gp);
                }
            }),
        ))
    }

    // ---- contractions ----

    /// Matrix product. Supports `(m,k)x(k,n)`, batched `(b,m,k)x(b,k,n)`, and
    /// a 2-D right operand broadcast over the batch: `(b,m,k)x(k,n)`.
    pub fn matmul(&self, rhs: &Tensor) -> Result<Tensor> {
        let (ls, rs) = (self.shape(), rhs.shape());
        let err = || Error::Dimension {
            op: "matmul",
            lhs: ls.to_vec(),
            rhs: rs.to_vec(),
        };
        match (ls.len(), rs.len()) {
            (2, 2) => {
                let (m, k) = (ls[0], ls[1]);
                let (k2, n) = (rs[0], rs[1]);
                if k != k2 {
                    return Err(err());
                }
                let mut data = vec![0.0; m * n];
                mm(self.data(), rhs.data(), m, k, n, &mut data);
                let (pa, pb) = (self.clone(), rhs.clone());
                Ok(Tensor::op(
                    data,
                    vec![m, n],
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |g| {
                        if pa.node.requires_grad {
                            let mut ga = vec![0.0; m * k];
                            mm_nt(g, pb.data(), m, n, k, &mut ga);
                            accumulate(&pa, &ga);
                        }
                        if pb.node.requires_grad {
                            let mut gb = vec![0.0; k * n];
                            mm_tn(pa.data(), g, m, k, n, &mut gb);
                            accumulate(&pb, &gb);
                        }
                    }),
                ))
            }
            (3, 3) => {
                let (b, m, k) = (ls[0], ls[1], ls[2]);
                let (b2, k2, n) = (rs[0], rs[1], rs[2]);
                if b != b2 || k != k2 {
                    return Err(err());
                }
                let mut data = vec![0.0; b * m * n];
                for i in 0..b {
                    mm(
                        &self.data()[i * m * k..(i + 1) * m * k],
                        &rhs.data()[i * k * n..(i + 1) * k * n],
                        m,
                        k,
                        n,
                        &mut data[i * m * n..(i + 1) * m * n],
                    );
                }
                let (pa, pb) = (self.clone(), rhs.clone());
                Ok(Tensor::op(
                    data,
                    vec![b, m, n],
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |g| {
                        if pa.node.requires_grad {
                            let mut ga = vec![0.0; b * m * k];
                            for i in 0..b {
                                mm_nt(
                                    &g[i * m * n..(i + 1) * m * n],
                                    &pb.data()[i * k * n..(i + 1) * k * n],
                                    m,
                                    n,
                                    k,
                                    &mut ga[i * m * k..(i + 1) * m * k],
                                );
                            }
                            accumulate(&pa, &ga);
                        }
                        if pb.node.requires_grad {
                            let mut gb = vec![0.0; b * k * n];
                            for i in 0..b {
                                mm_tn(
                                    &pa.data()[i * m * k..(i + 1) * m * k],
                                    &g[i * m * n..(i + 1) * m * n],
                                    m,
                                    k,
                                    n,
                                    &mut gb[i * k * n..(i + 1) * k * n],
                                );
                            }
                            accumulate(&pb, &gb);
                        }
                    }),
                ))
            }
            (3, 2) => {
                let (b, m, k) = (ls[0], ls[1], ls[2]);
                let (k2, n) = (rs[0], rs[1]);
                if k != k2 {
                    return Err(err());
                }
                // (b*m, k) x (k, n) is the same contraction.
                let mut data = vec![0.0; b * m * n];
                mm(self.data(), rhs.data(), b * m, k, n, &mut data);
                let (pa, pb) = (self.clone(), rhs.clone());
                Ok(Tensor::op(
                    data,
                    vec![b, m, n],
                    vec![self.clone(), rhs.clone()],
                    Box::new(move |g| {
                        if pa.node.requires_grad {
                            let mut ga = vec![0.0; b * m * k];
                            mm_nt(g, pb.data(), b * m, n, k, &mut ga);
                            accumulate(&pa, &ga);
                        }
                        if pb.node.requires_grad {
                            let mut gb = vec![0.0; k * n];
                            mm_tn(pa.data(), g, b * m, k, n, &mut gb);
                            accumulate(&pb, &gb);
                        }
                    }),
                ))
            }
            _ => Err(err()),
        }
    }

    // ---- normalization ----

    /// Numerically stable softmax along `axis` (max subtraction). Outputs
    /// along the axis are nonnegative and sum to 1 for all finite inputs.
    pub fn softmax(&self, axis: usize) -> Result<Tensor> {
        if axis >= self.shape().len() {
            return Err(Error::Usage(format!(
                "softmax axis {axis} out of range for shape {:?}",
                self.shape()
            )));
        }
        let shape = self.node.shape.clone();
        let lanes = Lanes::new(&shape, axis);
        let mut data = vec![0.0; self.numel()];
        let mut buf = vec![0.0; lanes.len];
        for lane in lanes.iter() {
            lane.read(self.data(), &mut buf);
            softmax_inplace(&mut buf);
            lane.write(&mut data, &buf);
        }
        let p = self.clone();
        let y_saved = data.clone();
        Ok(Tensor::op(
            data,
            shape.clone(),
            vec![self.clone()],
            Box::new(move |g| {
                let lanes = Lanes::new(&shape, axis);
                let mut gp = vec![0.0; y_saved.len()];
                let mut ybuf = vec![0.0; lanes.len];
                let mut gbuf = vec![0.0; lanes.len];
                for lane in lanes.iter() {
                    lane.read(&y_saved, &mut ybuf);
                    lane.read(g, &mut gbuf);
                    let dot: f64 = ybuf.iter().zip(&gbuf).map(|(y, g)| y * g).sum();
                    let vals: Vec<f64> = ybuf
                        .iter()
                        .zip(&gbuf)
                        .map(|(&y, &go)| y * (go - dot))
                        .collect();
                    lane.write(&mut gp, &vals);
                }
                accumulate(&p, &gp);
            }),
        ))
    }

    /// Softmax over the last axis restricted to unmasked key positions.
    ///
    /// `mask[j] = true` means position `j` participates; masked positions get
    /// exactly 0 weight (their logits are treated as negative infinity before
    /// normalization). A lane with no unmasked position yields an all-zero
    /// lane rather than NaN.
    pub fn masked_softmax_last(&self, mask: &[bool]) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd == 0 || self.shape()[nd - 1] != mask.len() {
            return Err(Error::Dimension {
                op: "masked_softmax_last",
                lhs: self.shape().to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let l = mask.len();
        let shape = self.node.shape.clone();
        let any_valid = mask.iter().any(|&v| v);
        let mut data = vec![0.0; self.numel()];
        if any_valid {
            for (row_in, row_out) in self.data().chunks_exact(l).zip(data.chunks_exact_mut(l)) {
                let max = row_in
                    .iter()
                    .zip(mask)
                    .filter(|(_, &m)| m)
                    .map(|(&x, _)| x)
                    .fold(f64::NEG_INFINITY, f64::max);
                let mut sum = 0.0;
                for j in 0..l {
                    if mask[j] {
                        let e = (row_in[j] - max).exp();
                        row_out[j] = e;
                        sum += e;
                    }
                }
                for v in row_out.iter_mut() {
                    *v /= sum;
                }
            }
        }
        let p = self.clone();
        let y_saved = data.clone();
        Ok(Tensor::op(
            data,
            shape,
            vec![self.clone()],
            Box::new(move |g| {
                // Same jacobian as softmax: masked positions have y = 0, so
                // they receive and contribute zero gradient.
                let mut gp = vec![0.0; y_saved.len()];
                for ((yrow, grow), out) in y_saved
                    .chunks_exact(l)
                    .zip(g.chunks_exact(l))
                    .zip(gp.chunks_exact_mut(l))
                {
                    let dot: f64 = yrow.iter().zip(grow).map(|(y, g)| y * g).sum();
                    for j in 0..l {
                        out[j] = yrow[j] * (grow[j] - dot);
                    }
                }
                accumulate(&p, &gp);
            }),
        ))
    }

    /// Layer normalization over the last axis with learned scale and shift.
    pub fn layer_norm(&self, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
        let nd = self.shape().len();
        if nd == 0 {
            return Err(Error::Usage("layer_norm requires rank >= 1".into()));
        }
        let d = self.shape()[nd - 1];
        if gamma.shape() != [d] || beta.shape() != [d] {
            return Err(Error::Dimension {
                op: "layer_norm",
                lhs: self.shape().to_vec(),
                rhs: gamma.shape().to_vec(),
            });
        }
        let mut data = vec![0.0; self.numel()];
        let mut xhat = vec![0.0; self.numel()];
        let mut inv_std = Vec::with_capacity(self.numel() / d);
        for (row, (out, xh)) in self
            .data()
            .chunks_exact(d)
            .zip(data.chunks_exact_mut(d).zip(xhat.chunks_exact_mut(d)))
        {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / d as f64;
            let istd = 1.0 / (var + eps).sqrt();
            inv_std.push(istd);
            for j in 0..d {
                xh[j] = (row[j] - mean) * istd;
                out[j] = gamma.data()[j] * xh[j] + beta.data()[j];
            }
        }
        let (px, pg, pb) = (self.clone(), gamma.clone(), beta.clone());
        Ok(Tensor::op(
            data,
            self.node.shape.clone(),
            vec![self.clone(), gamma.clone(), beta.clone()],
            Box::new(move |g| {
                let rows = g.len() / d;
                if px.node.requires_grad {
                    let mut gx = vec![0.0; g.len()];
                    for r in 0..rows {
                        let grow = &g[r * d..(r + 1) * d];
                        let xrow = &xhat[r * d..(r + 1) * d];
                        let istd = inv_std[r];
                        // dxhat = g * gamma; dx folds the mean/var terms.
                        let mut sum_dxh = 0.0;
                        let mut sum_dxh_xh = 0.0;
                        for j in 0..d {
                            let dxh = grow[j] * pg.data()[j];
                            sum_dxh += dxh;
                            sum_dxh_xh += dxh * xrow[j];
                        }
                        let out = &mut gx[r * d..(r + 1) * d];
                        for j in 0..d {
                            let dxh = grow[j] * pg.data()[j];
                            out[j] = istd
                                * (dxh - sum_dxh / d as f64 - xrow[j] * sum_dxh_xh / d as f64);
                        }
                    }
                    accumulate(&px, &gx);
                }
                if pg.node.requires_grad {
                    let mut gg = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gg[j] += g[r * d + j] * xhat[r * d + j];
                        }
                    }
                    accumulate(&pg, &gg);
                }
                if pb.node.requires_grad {
                    let mut gb = vec![0.0; d];
                    for r in 0..rows {
                        for j in 0..d {
                            gb[j] += g[r * d + j];
                        }
                    }
                    accumulate(&pb, &gb);
                }
            }),
        ))
    }

    // ---- reductions ----

    pub fn sum(&self) -> Tensor {
        let total: f64 = self.data().iter().sum();
        let p = self.clone();
        let n = self.numel();
        Tensor::op(
            vec![total],
            vec![],
            vec![self.clone()],
            Box::new(move |g| {
                accumulate(&p, &vec![g[0]; n]);
            }),
        )
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel();
        let total: f64 = self.data().iter().sum();
        let p = self.clone();
        Tensor::op(
            vec![total / n as f64],
            vec![],
            vec![self.clone()],
            Box::new(move |g| {
                accumulate(&p, &vec![g[0] / n as f64; n]);
            }),
        )
    }
}

/// Mean Huber loss between `pred` and `target`.
///
/// Per element with error `e = pred - target`: `0.5 e^2` when `|e| <= delta`,
/// otherwise `delta (|e| - 0.5 delta)`; the result is the mean over all
/// elements. Gradients flow into both operands when tracked; pass a detached
/// target to treat it as a constant.
pub fn huber(pred: &Tensor, target: &Tensor, delta: f64) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "huber",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    if delta <= 0.0 {
        return Err(Error::Validation(format!(
            "huber delta must be positive, got {delta}"
        )));
    }
    let n = pred.numel();
    let mut total = 0.0;
    for (&p, &t) in pred.data().iter().zip(target.data()) {
        let e = p - t;
        total += if e.abs() <= delta {
            0.5 * e * e
        } else {
            delta * (e.abs() - 0.5 * delta)
        };
    }
    let (pp, pt) = (pred.clone(), target.clone());
    Ok(Tensor::op(
        vec![total / n as f64],
        vec![],
        vec![pred.clone(), target.clone()],
        Box::new(move |g| {
            let scale = g[0] / n as f64;
            let psi: Vec<f64> = pp
                .data()
                .iter()
                .zip(pt.data())
                .map(|(&p, &t)| {
                    let e = p - t;
                    if e.abs() <= delta {
                        e
                    } else {
                        delta * e.signum()
                    }
                })
                .collect();
            if pp.node.requires_grad {
                let gp: Vec<f64> = psi.iter().map(|v| v * scale).collect();
                accumulate(&pp, &gp);
            }
            if pt.node.requires_grad {
                let gt: Vec<f64> = psi.iter().map(|v| -v * scale).collect();
                accumulate(&pt, &gt);
            }
        }),
    ))
}

/// Mean squared error between `pred` and `target`.
pub fn mse(pred: &Tensor, target: &Tensor) -> Result<Tensor> {
    if pred.shape() != target.shape() {
        return Err(Error::Dimension {
            op: "mse",
            lhs: pred.shape().to_vec(),
            rhs: target.shape().to_vec(),
        });
    }
    let n = pred.numel();
    let total: f64 = pred
        .data()
        .iter()
        .zip(target.data())
        .map(|(&p, &t)| (p - t) * (p - t))
        .sum();
    let (pp, pt) = (pred.clone(), target.clone());
    Ok(Tensor::op(
        vec![total / n as f64],
        vec![],
        vec![pred.clone(), target.clone()],
        Box::new(move |g| {
            let scale = 2.0 * g[0] / n as f64;
            if pp.node.requires_grad {
                let gp: Vec<f64> = pp
                    .data()
                    .iter()
                    .zip(pt.data())
                    .map(|(&p, &t)| scale * (p - t))
                    .collect();
                accumulate(&pp, &gp);
            }
            if pt.node.requires_grad {
                let gt: Vec<f64> = pp
                    .data()
                    .iter()
                    .zip(pt.data())
                    .map(|(&p, &t)| -scale * (p - t))
                    .collect();
                accumulate(&pt, &gt);
            }
        }),
    ))
}

/// Epsilon added inside the log of [`cross_entropy`] so that confident
/// mispredictions stay finite.
pub const CROSS_ENTROPY_EPS: f64 = 1e-12;

/// Cross-entropy `-sum_j target_j ln(predicted_j + eps)` between two
/// probability vectors. Accepts soft targets. Both inputs must sum to 1
/// within 1e-6.
pub fn cross_entropy(predicted_probs: &Tensor, target_probs: &Tensor) -> Result<Tensor> {
    if predicted_probs.shape() != target_probs.shape() {
        return Err(Error::Dimension {
            op: "cross_entropy",
            lhs: predicted_probs.shape().to_vec(),
            rhs: target_probs.shape().to_vec(),
        });
    }
    for (name, t) in [("predicted", predicted_probs), ("target", target_probs)] {
        let sum: f64 = t.data().iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::Validation(format!(
                "cross_entropy {name} probabilities sum to {sum}, expected 1 within 1e-6"
            )));
        }
    }
    let total: f64 = predicted_probs
        .data()
        .iter()
        .zip(target_probs.data())
        .map(|(&p, &t)| -t * (p + CROSS_ENTROPY_EPS).ln())
        .sum();
    let (pp, pt) = (predicted_probs.clone(), target_probs.clone());
    Ok(Tensor::op(
        vec![total],
        vec![],
        vec![predicted_probs.clone(), target_probs.clone()],
        Box::new(move |g| {
            if pp.node.requires_grad {
                let gp: Vec<f64> = pp
                    .data()
                    .iter()
                    .zip(pt.data())
                    .map(|(&p, &t)| -g[0] * t / (p + CROSS_ENTROPY_EPS))
                    .collect();
                accumulate(&pp, &gp);
            }
            if pt.node.requires_grad {
                let gt: Vec<f64> = pp
                    .data()
                    .iter()
                    .map(|&p| -g[0] * (p + CROSS_ENTROPY_EPS).ln())
                    .collect();
                accumulate(&pt, &gt);
            }
        }),
    ))
}

fn is_suffix(small: &[usize], big: &[usize]) -> bool {
    small.len() < big.len() && big[big.len() - small.len()..] == *small
}

/// `out += a(m,k) x b(k,n)`, row-major.
fn mm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let brow = &b[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out += a(m,n) x b(k,n)^T`, i.e. `out[i,p] = sum_j a[i,j] b[p,j]`.
fn mm_nt(a: &[f64], b: &[f64], m: usize, n: usize, k: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        let orow = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = 0.0;
            for j in 0..n {
                s += arow[j] * brow[j];
            }
            orow[p] += s;
        }
    }
}

/// `out += a(m,k)^T x b(m,n)`, i.e. `out[p,j] = sum_i a[i,p] b[i,j]`.
fn mm_tn(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let brow = &b[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

fn permute_data(data: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let nd = shape.len();
    let mut in_strides = vec![1usize; nd];
    for d in (0..nd.saturating_sub(1)).rev() {
        in_strides[d] = in_strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut out = vec![0.0; data.len()];
    let mut idx = vec![0usize; nd];
    for slot in out.iter_mut() {
        let mut src = 0;
        for d in 0..nd {
            src += idx[d] * in_strides[axes[d]];
        }
        *slot = data[src];
        for d in (0..nd).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    out
}

fn softmax_inplace(xs: &mut [f64]) {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for x in xs.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    for x in xs.iter_mut() {
        *x /= sum;
    }
}

/// Iterates the 1-D lanes of a tensor along one axis.
struct Lanes {
    len: usize,
    stride: usize,
    outer: usize,
    inner: usize,
}

struct Lane {
    base: usize,
    len: usize,
    stride: usize,
}

impl Lanes {
    fn new(shape: &[usize], axis: usize) -> Lanes {
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let outer: usize = shape[..axis].iter().product();
        Lanes {
            len,
            stride: inner,
            outer,
            inner,
        }
    }

    fn iter(&self) -> impl Iterator<Item = Lane> + '_ {
        let (len, stride, inner) = (self.len, self.stride, self.inner);
        (0..self.outer).flat_map(move |o| {
            (0..inner).map(move |i| Lane {
                base: o * len * inner + i,
                len,
                stride,
            })
        })
    }
}

impl Lane {
    fn read(&self, data: &[f64], buf: &mut [f64]) {
        for (j, slot) in buf.iter_mut().enumerate().take(self.len) {
            *slot = data[self.base + j * self.stride];
        }
    }

    fn write(&self, data: &mut [f64], vals: &[f64]) {
        for (j, &v) in vals.iter().enumerate().take(self.len) {
            data[self.base + j * self.stride] = v;
        }
    }
}

fn accumulate(t: &Tensor, g: &[f64]) {
    if !t.node.requires_grad {
        return;
    }
    let mut slot = t.node.grad.borrow_mut();
    match slot.as_mut() {
        Some(v) => {
            for (a, b) in v.iter_mut().zip(g) {
                *a += b;
            }
        }
        None => *slot = Some(g.to_vec()),
    }
}

/// Runs reverse-mode accumulation from a scalar loss. Gradients add into each
/// reachable `param` tensor; repeated calls without remounting accumulate.
pub fn backward(loss: &Tensor) -> Result<()> {
    if loss.numel() != 1 {
        return Err(Error::Usage(format!(
            "backward requires a scalar loss, got shape {:?}",
            loss.shape()
        )));
    }
    // Post-order DFS over grad-requiring nodes.
    let mut order: Vec<Tensor> = Vec::new();
    let mut visited: HashSet<usize> = HashSet::new();
    let mut stack: Vec<(Tensor, usize)> = vec![(loss.clone(), 0)];
    visited.insert(loss.node.id);
    while let Some((t, child)) = stack.pop() {
        if child < t.node.parents.len() {
            let next = t.node.parents[child].clone();
            stack.push((t, child + 1));
            if visited.insert(next.node.id) {
                stack.push((next, 0));
            }
        } else {
            order.push(t);
        }
    }
    accumulate(loss, &[1.0]);
    for t in order.iter().rev() {
        let grad = t.node.grad.borrow().clone();
        if let (Some(g), Some(f)) = (grad, t.node.backward.as_ref()) {
            f(&g);
            // Interior gradients are scratch space for this pass; only leaf
            // params accumulate across repeated backward calls.
            *t.node.grad.borrow_mut() = None;
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn central_diff<F: Fn(&[f64]) -> f64>(f: F, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut xp = x.to_vec();
                xp[i] += h;
                let mut xm = x.to_vec();
                xm[i] -= h;
                (f(&xp) - f(&xm)) / (2.0 * h)
            })
            .collect()
    }

    fn assert_close(analytic: &[f64], numeric: &[f64], tol: f64) {
        assert_eq!(analytic.len(), numeric.len());
        for (i, (a, n)) in analytic.iter().zip(numeric).enumerate() {
            let denom = a.abs().max(n.abs()).max(1.0);
            assert!(
                (a - n).abs() / denom <= tol,
                "grad mismatch at {i}: analytic {a} vs numeric {n}"
            );
        }
    }

    fn fill(n: usize, seed: u64) -> Vec<f64> {
        let mut rng = crate::rng::Rng::seed_from(seed);
        (0..n).map(|_| rng.uniform(-1.5, 1.5)).collect()
    }

    /// Gradchecks `scalar_of` against central differences on `x` at `shape`.
    fn gradcheck<F>(shape: &[usize], seed: u64, scalar_of: F)
    where
        F: Fn(&Tensor) -> Tensor,
    {
        let x = fill(shape.iter().product(), seed);
        let xt = Tensor::param(x.clone(), shape).unwrap();
        let loss = scalar_of(&xt);
        backward(&loss).unwrap();
        let analytic = xt.grad().unwrap();
        let f = |v: &[f64]| {
            let t = Tensor::from_vec(v.to_vec(), shape).unwrap();
            scalar_of(&t).item().unwrap()
        };
        let numeric = central_diff(f, &x, 1e-5);
        assert_close(&analytic, &numeric, 1e-4);
    }

    #[test]
    fn matmul_identity() {
        let m = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0], &[3, 3]).unwrap();
        let mut id = vec![0.0; 9];
        for i in 0..3 {
            id[i * 3 + i] = 1.0;
        }
        let idt = Tensor::from_vec(id, &[3, 3]).unwrap();
        let out = idt.matmul(&m).unwrap();
        assert_eq!(out.data(), m.data());
    }

    #[test]
    fn matmul_small_forced() {
        let a = Tensor::from_vec(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = Tensor::from_vec(vec![1.0, 1.0], &[2, 1]).unwrap();
        let out = a.matmul(&b).unwrap();
        assert_eq!(out.shape(), &[2, 1]);
        assert_eq!(out.data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let a = Tensor::zeros(&[2, 3]);
        let b = Tensor::zeros(&[4, 2]);
        let err = a.matmul(&b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
    }

    #[test]
    fn matmul_grad_of_sum_is_ones_times_b_transposed() {
        let a_data = fill(20, 11);
        let b_data = fill(10, 12);
        let a = Tensor::param(a_data.clone(), &[4, 5]).unwrap();
        let b = Tensor::from_vec(b_data.clone(), &[5, 2]).unwrap();
        let loss = a.matmul(&b).unwrap().sum();
        backward(&loss).unwrap();
        let got = a.grad().unwrap();
        // Closed form: ones(4,2) x b^T.
        let mut expect = vec![0.0; 20];
        for i in 0..4 {
            for p in 0..5 {
                expect[i * 5 + p] = b_data[p * 2] + b_data[p * 2 + 1];
            }
        }
        assert_close(&got, &expect, 1e-12);
        // And the finite-difference oracle agrees.
        let f = |v: &[f64]| {
            let t = Tensor::from_vec(v.to_vec(), &[4, 5]).unwrap();
            let b = Tensor::from_vec(b_data.clone(), &[5, 2]).unwrap();
            t.matmul(&b).unwrap().sum().item().unwrap()
        };
        let numeric = central_diff(f, &a_data, 1e-5);
        assert_close(&got, &numeric, 1e-4);
    }

    #[test]
    fn softmax_uniform_on_equal_inputs() {
        let x = Tensor::from_vec(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let y = x.softmax(0).unwrap();
        for &v in y.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_large_magnitude_is_stable() {
        let x = Tensor::from_vec(vec![1000.0, 0.0], &[2]).unwrap();
        let y = x.softmax(0).unwrap();
        assert!((y.data()[0] - 1.0).abs() < 1e-12);
        assert!(y.data()[1].abs() < 1e-12);
        assert!(y.data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn softmax_matches_direct_scalar_evaluation() {
        // Oracle: plain exp/sum evaluated directly, no max subtraction.
        let xs = [1.0f64, 2.0, 3.0];
        let sum: f64 = xs.iter().map(|x| x.exp()).sum();
        let expect: Vec<f64> = xs.iter().map(|x| x.exp() / sum).collect();
        let y = Tensor::from_vec(xs.to_vec(), &[3]).unwrap().softmax(0).unwrap();
        assert_close(y.data(), &expect, 1e-12);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let x = Tensor::from_vec(fill(12, 3), &[3, 4]).unwrap();
        let y = x.softmax(1).unwrap();
        for row in y.data().chunks(4) {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn huber_examples() {
        let z = Tensor::from_vec(vec![0.7, -0.2], &[2]).unwrap();
        assert_eq!(huber(&z, &z, 1.0).unwrap().item().unwrap(), 0.0);
        let p = Tensor::from_vec(vec![0.5], &[1]).unwrap();
        let t = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        assert!((huber(&p, &t, 1.0).unwrap().item().unwrap() - 0.125).abs() < 1e-15);
        let p2 = Tensor::from_vec(vec![2.0], &[1]).unwrap();
        assert!((huber(&p2, &t, 1.0).unwrap().item().unwrap() - 1.5).abs() < 1e-15);
    }

    #[test]
    fn cross_entropy_examples() {
        let onehot = Tensor::from_vec(vec![0.0, 1.0, 0.0], &[3]).unwrap();
        let v = cross_entropy(&onehot, &onehot).unwrap().item().unwrap();
        assert!(v.abs() < 1e-9, "{v}");
        let u = Tensor::from_vec(vec![0.25; 4], &[4]).unwrap();
        let v = cross_entropy(&u, &u).unwrap().item().unwrap();
        assert!((v - 4.0f64.ln()).abs() < 1e-9);
        // Oracle: direct scalar evaluation.
        let p = Tensor::from_vec(vec![0.6, 0.4], &[2]).unwrap();
        let t = Tensor::from_vec(vec![0.7, 0.3], &[2]).unwrap();
        let expect = -(0.7 * (0.6f64 + 1e-12).ln() + 0.3 * (0.4f64 + 1e-12).ln());
        assert!((cross_entropy(&p, &t).unwrap().item().unwrap() - expect).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_rejects_unnormalized() {
        let bad = Tensor::from_vec(vec![0.5, 0.6], &[2]).unwrap();
        let ok = Tensor::from_vec(vec![0.5, 0.5], &[2]).unwrap();
        assert!(cross_entropy(&bad, &ok).is_err());
        assert!(cross_entropy(&ok, &bad).is_err());
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let x = Tensor::param(fill(6, 4), &[2, 3]).unwrap();
        backward(&x.sum()).unwrap();
        assert_eq!(x.grad().unwrap(), vec![1.0; 6]);
    }

    #[test]
    fn backward_huber_quadratic_branch() {
        let x = Tensor::param(vec![0.3], &[1]).unwrap();
        let zero = Tensor::from_vec(vec![0.0], &[1]).unwrap();
        backward(&huber(&x, &zero, 1.0).unwrap()).unwrap();
        assert_close(&x.grad().unwrap(), &[0.3], 1e-12);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        assert!(backward(&x).is_err());
    }

    #[test]
    fn backward_accumulates_across_calls() {
        let x = Tensor::param(vec![1.0, 2.0], &[2]).unwrap();
        let loss = x.sum();
        backward(&loss).unwrap();
        backward(&loss).unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0]);
    }

    #[test]
    fn gradcheck_elementwise_and_structural() {
        gradcheck(&[2, 3], 21, |x| x.add_fixture().sum());
        gradcheck(&[2, 3], 22, |x| {
            let y = Tensor::from_vec(fill(6, 220), &[2, 3]).unwrap();
            x.mul(&y).unwrap().mean()
        });
        gradcheck(&[3, 4], 23, |x| x.relu().mean());
        gradcheck(&[2, 3, 4], 24, |x| x.permute(&[2, 0, 1]).unwrap().weighted());
        gradcheck(&[2, 6], 25, |x| x.reshape(&[3, 4]).unwrap().weighted());
        gradcheck(&[4, 3], 26, |x| x.narrow(0, 1, 2).unwrap().weighted());
        gradcheck(&[5], 27, |x| x.tile_rows(3).unwrap().weighted());
        gradcheck(&[2, 2], 28, |x| {
            let y = Tensor::from_vec(fill(4, 280), &[2, 2]).unwrap();
            Tensor::concat(&[x.clone(), y], 1).unwrap().weighted()
        });
    }

    #[test]
    fn gradcheck_bias_broadcast_add() {
        let x = fill(4, 31);
        let b = Tensor::param(x.clone(), &[4]).unwrap();
        let a = Tensor::from_vec(fill(12, 32), &[3, 4]).unwrap();
        let loss = a.add(&b).unwrap().weighted();
        backward(&loss).unwrap();
        let f = |v: &[f64]| {
            let b = Tensor::from_vec(v.to_vec(), &[4]).unwrap();
            let a = Tensor::from_vec(fill(12, 32), &[3, 4]).unwrap();
            a.add(&b).unwrap().weighted().item().unwrap()
        };
        assert_close(&b.grad().unwrap(), &central_diff(f, &x, 1e-5), 1e-4);
    }

    #[test]
    fn gradcheck_contractions() {
        gradcheck(&[4, 5], 41, |x| {
            let b = Tensor::from_vec(fill(10, 410), &[5, 2]).unwrap();
            x.matmul(&b).unwrap().weighted()
        });
        gradcheck(&[5, 2], 42, |x| {
            let a = Tensor::from_vec(fill(20, 420), &[4, 5]).unwrap();
            a.matmul(x).unwrap().weighted()
        });
        gradcheck(&[2, 3, 4], 43, |x| {
            let b = Tensor::from_vec(fill(2 * 4 * 2, 430), &[2, 4, 2]).unwrap();
            x.matmul(&b).unwrap().weighted()
        });
        gradcheck(&[2, 4, 2], 44, |x| {
            let a = Tensor::from_vec(fill(2 * 3 * 4, 440), &[2, 3, 4]).unwrap();
            a.matmul(x).unwrap().weighted()
        });
        gradcheck(&[4, 2], 45, |x| {
            let a = Tensor::from_vec(fill(2 * 3 * 4, 450), &[2, 3, 4]).unwrap();
            a.matmul(x).unwrap().weighted()
        });
    }

    #[test]
    fn gradcheck_normalizers_and_losses() {
        gradcheck(&[2, 5], 51, |x| x.softmax(1).unwrap().weighted());
        gradcheck(&[3, 4], 52, |x| {
            x.masked_softmax_last(&[true, false, true, true])
                .unwrap()
                .weighted()
        });
        gradcheck(&[3, 4], 53, |x| {
            let g = Tensor::from_vec(vec![1.1, 0.9, 1.2, 0.8], &[4]).unwrap();
            let b = Tensor::from_vec(vec![0.1, -0.2, 0.3, 0.0], &[4]).unwrap();
            x.layer_norm(&g, &b, 1e-5).unwrap().weighted()
        });
        // layer_norm gradient w.r.t. gamma/beta.
        let gdata = fill(4, 54);
        let gamma = Tensor::param(gdata.clone(), &[4]).unwrap();
        let beta = Tensor::param(vec![0.0; 4], &[4]).unwrap();
        let x = Tensor::from_vec(fill(12, 540), &[3, 4]).unwrap();
        let loss = x.layer_norm(&gamma, &beta, 1e-5).unwrap().weighted();
        backward(&loss).unwrap();
        let fg = |v: &[f64]| {
            let g = Tensor::from_vec(v.to_vec(), &[4]).unwrap();
            let b = Tensor::from_vec(vec![0.0; 4], &[4]).unwrap();
            let x = Tensor::from_vec(fill(12, 540), &[3, 4]).unwrap();
            x.layer_norm(&g, &b, 1e-5).unwrap().weighted().item().unwrap()
        };
        assert_close(&gamma.grad().unwrap(), &central_diff(fg, &gdata, 1e-5), 1e-4);
        gradcheck(&[6], 55, |x| {
            let t = Tensor::from_vec(fill(6, 550), &[6]).unwrap();
            huber(x, &t, 0.7).unwrap()
        });
        gradcheck(&[6], 56, |x| {
            let t = Tensor::from_vec(fill(6, 560), &[6]).unwrap();
            mse(x, &t).unwrap()
        });
        // cross_entropy via softmax so the input stays a probability vector.
        gradcheck(&[5], 57, |x| {
            let p = x.softmax(0).unwrap();
            let t = Tensor::from_vec(vec![0.1, 0.2, 0.3, 0.25, 0.15], &[5]).unwrap();
            cross_entropy(&p, &t).unwrap()
        });
    }

    #[test]
    fn masked_softmax_ignores_masked_values_bitwise() {
        let mask = [true, false, true, false];
        let a = Tensor::from_vec(vec![0.3, 5.0, -0.7, 2.0], &[1, 4]).unwrap();
        let b = Tensor::from_vec(vec![0.3, -99.0, -0.7, 1e6], &[1, 4]).unwrap();
        let ya = a.masked_softmax_last(&mask).unwrap();
        let yb = b.masked_softmax_last(&mask).unwrap();
        for (x, y) in ya.data().iter().zip(yb.data()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        assert_eq!(ya.data()[1], 0.0);
        assert_eq!(ya.data()[3], 0.0);
    }

    #[test]
    fn masked_softmax_all_masked_yields_zeros() {
        let x = Tensor::from_vec(vec![1.0, 2.0, 3.0], &[1, 3]).unwrap();
        let y = x.masked_softmax_last(&[false, false, false]).unwrap();
        assert_eq!(y.data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn detach_blocks_gradients() {
        let x = Tensor::param(vec![2.0], &[1]).unwrap();
        let d = x.mul_scalar(3.0).detach();
        let y = d.mul_scalar(5.0).sum();
        backward(&y).unwrap();
        assert!(x.grad().is_none());
    }

    /// Helpers giving each gradcheck a non-uniform scalar head so that
    /// gradients are not constant in the input.
    trait TestHead {
        fn weighted(&self) -> Tensor;
        fn add_fixture(&self) -> Tensor;
    }

    impl TestHead for Tensor {
        fn weighted(&self) -> Tensor {
            let w: Vec<f64> = (0..self.numel()).map(|i| 0.3 + 0.1 * i as f64).collect();
            let wt = Tensor::from_vec(w, self.shape()).unwrap();
            self.mul(&wt).unwrap().sum()
        }

        fn add_fixture(&self) -> Tensor {
            let y = Tensor::from_vec(fill(self.numel(), 777), self.shape()).unwrap();
            self.add(&y).unwrap()
        }
    }
}
