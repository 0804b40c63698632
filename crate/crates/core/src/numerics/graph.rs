//! Reverse-mode differentiation over a linear tape.
//!
//! Every op evaluates its forward kernel immediately and records the inputs
//! (plus whatever the kernel cached) on the tape. Nodes are appended in
//! evaluation order, so the tape is already a topological order and
//! `backward` is a single reverse sweep.

use std::collections::HashMap;

use super::kernels;
use super::params::ParamStore;
use super::tensor::{Real, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    MeanPool {
        x: Var,
        mask: Vec<bool>,
    },
    RowDot(Var, Var),
    L2Normalize {
        x: Var,
        norms: Vec<T>,
    },
    Gather {
        x: Var,
        index: Vec<usize>,
    },
    Concat(Vec<Var>),
    BatchMatMul {
        a: Var,
        b: Var,
        transpose_b: bool,
    },
    Reshape(Var),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug)]
struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
}

/// Tape of recorded operations.
#[derive(Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<String, Var>,
}

/// Gradients of one backward sweep, indexed by node.
#[derive(Debug)]
pub struct Gradients<T: Real> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
    params: Vec<(String, Var)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to `v`; zeros when `v` did not reach the root.
    pub fn wrt(&self, v: Var) -> Tensor<T> {
        let shape = &self.shapes[v.0];
        match &self.grads[v.0] {
            Some(g) => Tensor::from_parts(shape.clone(), g.clone()),
            None => Tensor::zeros(shape),
        }
    }

    /// Adds every parameter gradient into the store's accumulators.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        for (name, v) in &self.params {
            if let Some(g) = &self.grads[v.0] {
                store.accumulate(name, g)?;
            }
        }
        Ok(())
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Constant input. It still receives a gradient, readable through
    /// [`Gradients::wrt`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf)
    }

    /// Leaf bound to a named parameter. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var, NumericsError> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let value = store.get(name)?.clone();
        let v = self.push(value, Op::Param);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let y = kernels::matmul(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::MatMul(a, b)))
    }

    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var, NumericsError> {
        let y = kernels::add_bias(self.value(x), self.value(b))?;
        Ok(self.push(y, Op::AddBias(x, b)))
    }

    /// `xW + b` for `x` of shape `[.., p]`; leading axes are flattened.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let p = *shape.last().ok_or(NumericsError::Rank {
            op: "linear",
            expected: 1,
            shape: shape.clone(),
        })?;
        let flat = if shape.len() == 2 {
            x
        } else {
            self.reshape(x, &[shape.iter().product::<usize>() / p.max(1), p])?
        };
        let mut y = self.matmul(flat, w)?;
        if let Some(b) = b {
            y = self.add_bias(y, b)?;
        }
        if shape.len() != 2 {
            let mut out = shape;
            *out.last_mut().unwrap() = self.shape(y)[1];
            y = self.reshape(y, &out)?;
        }
        Ok(y)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        Tensor::from_parts(
            av.shape().to_vec(),
            av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect(),
        )
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("add", a, b)?;
        let y = self.zip_with(a, b, |x, y| x + y);
        Ok(self.push(y, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("sub", a, b)?;
        let y = self.zip_with(a, b, |x, y| x - y);
        Ok(self.push(y, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.same_shape("mul", a, b)?;
        let y = self.zip_with(a, b, |x, y| x * y);
        Ok(self.push(y, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let xv = self.value(x);
        let y = Tensor::from_parts(xv.shape().to_vec(), xv.data().iter().map(|&v| v * s).collect());
        self.push(y, Op::Scale(x, s))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let y = kernels::tanh_map(self.value(x));
        self.push(y, Op::Tanh(x))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var, NumericsError> {
        let out = kernels::layer_norm_cached(self.value(x), self.value(gain), self.value(bias), eps)?;
        Ok(self.push(
            out.y,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat: out.xhat,
                inv_std: out.inv_std,
            },
        ))
    }

    /// Softmax along the last axis; `mask` (same element count as `x`)
    /// pins masked entries to zero probability.
    pub fn softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var, NumericsError> {
        let y = kernels::masked_softmax(self.value(x), mask)?;
        Ok(self.push(y, Op::Softmax(x)))
    }

    pub fn mean_pool(&mut self, x: Var, mask: &[bool]) -> Result<Var, NumericsError> {
        let y = kernels::masked_mean_pool(self.value(x), mask)?;
        Ok(self.push(
            y,
            Op::MeanPool {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let y = kernels::row_dot(self.value(a), self.value(b))?;
        Ok(self.push(y, Op::RowDot(a, b)))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Result<Var, NumericsError> {
        let (y, norms) = kernels::l2_normalize_cached(self.value(x))?;
        Ok(self.push(y, Op::L2Normalize { x, norms }))
    }

    pub fn gather(&mut self, x: Var, index: &[usize]) -> Result<Var, NumericsError> {
        let y = kernels::gather_rows(self.value(x), index)?;
        Ok(self.push(
            y,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
        ))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let y = kernels::concat_last(&vals)?;
        Ok(self.push(y, Op::Concat(parts.to_vec())))
    }

    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var, NumericsError> {
        let y = kernels::batch_matmul(self.value(a), self.value(b), transpose_b)?;
        Ok(self.push(y, Op::BatchMatMul { a, b, transpose_b }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let y = self.value(x).reshape(shape)?;
        Ok(self.push(y, Op::Reshape(x)))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel().max(1);
        let s = self.sum(x);
        self.scale(s, T::one() / T::lit(n as f64))
    }

    /// Mean over rows of the softmax cross-entropy at `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var, NumericsError> {
        let (loss, probs) = kernels::cross_entropy_cached(self.value(logits), targets)?;
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a single-element root.
    pub fn backward(&self, root: Var) -> Result<Gradients<T>, NumericsError> {
        let rv = self.value(root);
        if rv.numel() != 1 {
            return Err(NumericsError::NotScalar {
                shape: rv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(vec![T::one()]);

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }

        let mut params: Vec<(String, Var)> = self.params.iter().map(|(k, &v)| (k.clone(), v)).collect();
        params.sort();
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape().to_vec()).collect(),
            params,
        })
    }

    /// Backward sweep that adds parameter gradients into `store`.
    pub fn backward_into(&self, root: Var, store: &mut ParamStore<T>) -> Result<(), NumericsError> {
        self.backward(root)?.accumulate_into(store)
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], v: Var, contrib: Vec<T>) {
        match &mut grads[v.0] {
            Some(existing) => add_into(existing, &contrib),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn acc_with(&self, grads: &mut [Option<Vec<T>>], v: Var, f: impl FnOnce(&mut [T])) {
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(vec![T::zero(); self.nodes[v.0].value.numel()]);
        }
        f(slot.as_mut().unwrap());
    }

    fn propagate(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let y = node.value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                self.acc_with(grads, *a, |ga| kernels::gemm_bt(g, bv.data(), m, n, k, ga));
                self.acc_with(grads, *b, |gb| kernels::gemm_at(av.data(), g, m, k, n, gb));
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.to_vec());
                let d = self.value(*b).numel();
                self.acc_with(grads, *b, |gb| {
                    for row in g.chunks(d) {
                        add_into(gb, row);
                    }
                });
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.to_vec());
                self.acc(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, g.iter().zip(bv).map(|(&gi, &bi)| gi * bi).collect());
                self.acc(grads, *b, g.iter().zip(av).map(|(&gi, &ai)| gi * ai).collect());
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.iter().map(|&v| v * *s).collect()),
            Op::Tanh(x) => self.acc(
                grads,
                *x,
                g.iter().zip(y).map(|(&gi, &yi)| gi * (T::one() - yi * yi)).collect(),
            ),
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let gv = self.value(*gain).data();
                let d = gv.len();
                let dn = T::lit(d as f64);
                let mut gx = vec![T::zero(); g.len()];
                let mut ggain = vec![T::zero(); d];
                let mut gbias = vec![T::zero(); d];
                for (r, &is) in inv_std.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let hr = &xhat[r * d..(r + 1) * d];
                    let mut mean_gh = T::zero();
                    let mut mean_ghh = T::zero();
                    for j in 0..d {
                        ggain[j] += gr[j] * hr[j];
                        gbias[j] += gr[j];
                        let gh = gr[j] * gv[j];
                        mean_gh += gh;
                        mean_ghh += gh * hr[j];
                    }
                    mean_gh /= dn;
                    mean_ghh /= dn;
                    for j in 0..d {
                        let gh = gr[j] * gv[j];
                        gx[r * d + j] = is * (gh - mean_gh - hr[j] * mean_ghh);
                    }
                }
                self.acc(grads, *x, gx);
                self.acc(grads, *gain, ggain);
                self.acc(grads, *bias, gbias);
            }
            Op::Softmax(x) => {
                let k = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for ((gr, yr), or) in g.chunks(k).zip(y.chunks(k)).zip(gx.chunks_mut(k)) {
                    let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..k {
                        or[j] = yr[j] * (gr[j] - s);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::MeanPool { x, mask } => {
                let xs = self.value(*x).shape().to_vec();
                let (r, d) = (xs[xs.len() - 2], xs[xs.len() - 1]);
                let groups = mask.len() / r.max(1);
                self.acc_with(grads, *x, |gx| {
                    for gi in 0..groups {
                        let m = &mask[gi * r..(gi + 1) * r];
                        let inv = T::one() / T::lit(m.iter().filter(|&&b| b).count() as f64);
                        let go = &g[gi * d..(gi + 1) * d];
                        for (ri, &live) in m.iter().enumerate() {
                            if live {
                                let base = (gi * r + ri) * d;
                                for j in 0..d {
                                    gx[base + j] += go[j] * inv;
                                }
                            }
                        }
                    }
                });
            }
            Op::RowDot(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let d = self.value(*a).last_dim();
                let mut ga = vec![T::zero(); av.len()];
                let mut gb = vec![T::zero(); bv.len()];
                for (r, &gr) in g.iter().enumerate() {
                    for j in r * d..(r + 1) * d {
                        ga[j] = gr * bv[j];
                        gb[j] = gr * av[j];
                    }
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::L2Normalize { x, norms } => {
                let d = node.value.last_dim();
                let mut gx = vec![T::zero(); g.len()];
                for (r, &n) in norms.iter().enumerate() {
                    let gr = &g[r * d..(r + 1) * d];
                    let yr = &y[r * d..(r + 1) * d];
                    let s: T = gr.iter().zip(yr).map(|(&a, &b)| a * b).sum();
                    for j in 0..d {
                        gx[r * d + j] = (gr[j] - yr[j] * s) / n;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Gather { x, index } => {
                let block = if index.is_empty() { 0 } else { g.len() / index.len() };
                self.acc_with(grads, *x, |gx| {
                    for (o, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * block..(src + 1) * block], &g[o * block..(o + 1) * block]);
                    }
                });
            }
            Op::Concat(parts) => {
                let total = node.value.last_dim();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    let mut gp = Vec::with_capacity(rows * w);
                    for r in 0..rows {
                        gp.extend_from_slice(&g[r * total + offset..r * total + offset + w]);
                    }
                    self.acc(grads, p, gp);
                    offset += w;
                }
            }
            Op::BatchMatMul { a, b, transpose_b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (bs, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
                let n = node.value.shape()[2];
                let (ad, bd) = (av.data(), bv.data());
                self.acc_with(grads, *a, |ga| {
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let bsl = &bd[s * k * n..(s + 1) * k * n];
                        let gas = &mut ga[s * m * k..(s + 1) * m * k];
                        if *transpose_b {
                            // b is [n,k]: ga = g·b
                            kernels::gemm(gs, bsl, m, n, k, gas);
                        } else {
                            // b is [k,n]: ga = g·bᵀ
                            kernels::gemm_bt(gs, bsl, m, n, k, gas);
                        }
                    }
                });
                self.acc_with(grads, *b, |gb| {
                    for s in 0..bs {
                        let gs = &g[s * m * n..(s + 1) * m * n];
                        let asl = &ad[s * m * k..(s + 1) * m * k];
                        let gbs = &mut gb[s * k * n..(s + 1) * k * n];
                        if *transpose_b {
                            // gb[n,k] = gᵀ·a
                            kernels::gemm_at(gs, asl, m, n, k, gbs);
                        } else {
                            // gb[k,n] = aᵀ·g
                            kernels::gemm_at(asl, gs, m, k, n, gbs);
                        }
                    }
                });
            }
            Op::Reshape(x) => self.acc(grads, *x, g.to_vec()),
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![g[0]; n]);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let c = probs.len() / rows;
                let scale = g[0] / T::lit(rows as f64);
                let mut gl: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gl[r * c + t] -= scale;
                }
                self.acc(grads, *logits, gl);
            }
        }
    }
}
