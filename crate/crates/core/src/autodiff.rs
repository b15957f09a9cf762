//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Each forward op appends a node holding its output and enough of its
//! inputs to run the local vector-Jacobian product. [`Tape::backward`]
//! walks the nodes in reverse, so the tape is also the topological order.

use alloc::collections::BTreeMap;
use alloc::rc::Rc;
use alloc::vec;
use alloc::vec::Vec;

use crate::fft;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matmul_acc, matmul_nt_acc, matmul_tn_acc, Tensor};

const LN_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum ColKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param,
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    MulConst(Var, Rc<[f64]>),
    DotConst(Var, Rc<[f64]>),
    AddBias(Var, Var),
    MatMul(Var, Var),
    Bmm { a: Var, b: Var, groups: usize, m: usize, k: usize, n: usize, trans_b: bool },
    Gather(Var, Rc<[usize]>),
    Concat(Var, Var),
    Softmax { logits: Var, mask: Option<Var>, heads: usize, block: usize },
    LayerNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, rstd: Vec<f64> },
    Gelu(Var),
    Abs(Var),
    Softplus(Var),
    PairwiseL1 { f: Var, w: Var },
    RecipEps(Var),
    RowMaxNorm(Var),
    GumbelSigmoid { p: Var, tau: f64, clamped: Vec<bool> },
    StraightThrough(Var),
    MeanLast(Var),
    Col(Var, Var, ColKind),
    ClampedSqrt(Var, f64),
    Dft(Var),
    Idft(Var),
    Mse(Var, Var),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// A recording of one forward pass against a fixed parameter store.
pub struct Tape<'p> {
    params: &'p ParamStore,
    nodes: Vec<Node>,
    param_vars: BTreeMap<ParamId, Var>,
}

fn tensor(shape: &[usize], data: Vec<f64>) -> Tensor {
    Tensor::new(shape, data).expect("op produced consistent shape")
}

fn with_last(shape: &[usize], last: usize) -> Vec<usize> {
    let mut s = shape.to_vec();
    match s.last_mut() {
        Some(l) => *l = last,
        None => s.push(last),
    }
    s
}

#[inline]
fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2))
}

#[inline]
fn gelu_grad(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x * core::f64::consts::FRAC_1_SQRT_2));
    let pdf = libm::exp(-0.5 * x * x) * 0.398_942_280_401_432_7;
    cdf + x * pdf
}

#[inline]
fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

#[inline]
fn softplus(x: f64) -> f64 {
    if x > 30.0 {
        x
    } else {
        libm::log1p(libm::exp(x))
    }
}

impl<'p> Tape<'p> {
    pub fn new(params: &'p ParamStore) -> Self {
        Self { params, nodes: Vec::new(), param_vars: BTreeMap::new() }
    }

    pub fn params(&self) -> &'p ParamStore {
        self.params
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// A value that receives no gradient of interest.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Copy of the current value of a stored parameter (once per tape).
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(self.params.get(id).clone(), Op::Param);
        self.param_vars.insert(id, v);
        v
    }

    /// Value copy of `x` cut off from the graph.
    pub fn detach(&mut self, x: Var) -> Var {
        let v = self.value(x).clone();
        self.constant(v)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape keeps element count");
        self.push(v, Op::Reshape(x))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "elementwise operands differ in shape");
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| f(*x, *y)).collect();
        tensor(va.shape(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let v = self.value(x);
        tensor(v.shape(), v.data().iter().map(|&e| f(e)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x + y);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x - y);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.zip_with(a, b, |x, y| x * y);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, x: Var, k: f64) -> Var {
        let v = self.map(x, |e| e * k);
        self.push(v, Op::Scale(x, k))
    }

    /// Elementwise product with a constant array (dropout masks).
    pub fn mul_const(&mut self, x: Var, c: Rc<[f64]>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), c.len());
        let data = vx.data().iter().zip(c.iter()).map(|(a, b)| a * b).collect();
        let v = tensor(vx.shape(), data);
        self.push(v, Op::MulConst(x, c))
    }

    /// `sum(x * c)` as a scalar.
    pub fn dot_const(&mut self, x: Var, c: Rc<[f64]>) -> Var {
        let vx = self.value(x);
        assert_eq!(vx.len(), c.len());
        let s = crate::tensor::dot(vx.data(), &c);
        self.push(Tensor::scalar(s), Op::DotConst(x, c))
    }

    /// `x[..., n] + b[n]`
    pub fn add_bias(&mut self, x: Var, b: Var) -> Var {
        let (vx, vb) = (self.value(x), self.value(b));
        let n = vb.len();
        assert_eq!(vx.last_dim(), n, "bias width");
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(n) {
            for (o, bv) in row.iter_mut().zip(vb.data()) {
                *o += bv;
            }
        }
        let v = tensor(vx.shape(), data);
        self.push(v, Op::AddBias(x, b))
    }

    /// `x[..., k] @ w[k, n]`, leading axes of `x` flattened into rows.
    pub fn matmul(&mut self, x: Var, w: Var) -> Var {
        let (vx, vw) = (self.value(x), self.value(w));
        assert_eq!(vw.shape().len(), 2, "matmul weight must be 2-D");
        let (k, n) = (vw.shape()[0], vw.shape()[1]);
        assert_eq!(vx.last_dim(), k, "matmul inner dimension");
        let rows = vx.len() / k;
        let mut out = vec![0.0; rows * n];
        matmul_acc(vx.data(), vw.data(), &mut out, rows, k, n);
        let v = tensor(&with_last(vx.shape(), n), out);
        self.push(v, Op::MatMul(x, w))
    }

    /// Batched product over the leading axis: `a[g,m,k] @ b[g,k,n]`, or
    /// `a[g,m,k] @ b[g,n,k]^T` when `trans_b`.
    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (sa, sb) = (va.shape(), vb.shape());
        assert_eq!(sa.len(), 3);
        assert_eq!(sb.len(), 3);
        let (groups, m, k) = (sa[0], sa[1], sa[2]);
        assert_eq!(sb[0], groups);
        let n = if trans_b {
            assert_eq!(sb[2], k);
            sb[1]
        } else {
            assert_eq!(sb[1], k);
            sb[2]
        };
        let mut out = vec![0.0; groups * m * n];
        for g in 0..groups {
            let ag = &va.data()[g * m * k..(g + 1) * m * k];
            let bg = &vb.data()[g * k * n..(g + 1) * k * n];
            let og = &mut out[g * m * n..(g + 1) * m * n];
            if trans_b {
                matmul_nt_acc(ag, bg, og, m, k, n);
            } else {
                matmul_acc(ag, bg, og, m, k, n);
            }
        }
        let v = tensor(&[groups, m, n], out);
        self.push(v, Op::Bmm { a, b, groups, m, k, n, trans_b })
    }

    /// `out[i] = x[index[i]]`, reshaped to `shape`.
    pub fn gather(&mut self, x: Var, index: Rc<[usize]>, shape: &[usize]) -> Var {
        let vx = self.value(x);
        let data = index.iter().map(|&i| vx.data()[i]).collect();
        let v = tensor(shape, data);
        self.push(v, Op::Gather(x, index))
    }

    /// Axis permutation; `perm[i]` names the input axis that becomes output axis `i`.
    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Var {
        let shape = self.shape(x).to_vec();
        assert_eq!(perm.len(), shape.len());
        let mut in_strides = vec![1usize; shape.len()];
        for i in (0..shape.len().saturating_sub(1)).rev() {
            in_strides[i] = in_strides[i + 1] * shape[i + 1];
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let total: usize = shape.iter().product();
        let mut index = Vec::with_capacity(total);
        let mut counter = vec![0usize; out_shape.len()];
        for _ in 0..total {
            let src: usize = counter.iter().zip(perm).map(|(&c, &p)| c * in_strides[p]).sum();
            index.push(src);
            for ax in (0..counter.len()).rev() {
                counter[ax] += 1;
                if counter[ax] < out_shape[ax] {
                    break;
                }
                counter[ax] = 0;
            }
        }
        self.gather(x, index.into(), &out_shape)
    }

    /// Concatenate along the last axis; leading axes must agree.
    pub fn concat_last(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        let (na, nb) = (va.last_dim(), vb.last_dim());
        let rows = va.len() / na;
        assert_eq!(rows, vb.len() / nb, "concat leading axes");
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for r in 0..rows {
            data.extend_from_slice(va.row(r));
            data.extend_from_slice(vb.row(r));
        }
        let v = tensor(&with_last(va.shape(), na + nb), data);
        self.push(v, Op::Concat(a, b))
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, logits: Var) -> Var {
        self.masked_softmax(logits, None, 1)
    }

    /// Softmax over the last axis with multiplicative mask weights:
    /// `a_j = m_j exp(l_j) / sum_k m_k exp(l_k)`.
    ///
    /// `logits` is `[G, heads, T, T]` (any leading layout with that element
    /// order) and `mask` is `[G, T, T]`, shared by every head. A zero mask
    /// entry yields an attention weight of exactly zero, the same as a `-inf`
    /// logit, while a mask in `(0, 1]` acts as adding `ln m` to the logit.
    pub fn masked_softmax(&mut self, logits: Var, mask: Option<Var>, heads: usize) -> Var {
        let vl = self.value(logits);
        let t = vl.last_dim();
        let block = t * t;
        let mut out = vec![0.0; vl.len()];
        let mvals = mask.map(|m| self.value(m).data());
        if let Some(mv) = mvals {
            assert_eq!(mv.len() * heads, vl.len(), "mask must broadcast over heads");
        }
        for (r, orow) in out.chunks_mut(t).enumerate() {
            let lrow = vl.row(r);
            let start = r * t;
            let mrow = mvals.map(|mv| {
                let base = (start / (heads * block)) * block + (start % block);
                &mv[base..base + t]
            });
            softmax_row(lrow, mrow, orow);
        }
        let v = tensor(vl.shape(), out);
        self.push(v, Op::Softmax { logits, mask, heads, block })
    }

    /// LayerNorm over the last axis with learned gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        let rows = vx.len() / n;
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        assert_eq!(g.len(), n);
        let mut xhat = Vec::with_capacity(vx.len());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / libm::sqrt(var + LN_EPS);
            rstd.push(rs);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * rs;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = tensor(vx.shape(), out);
        self.push(v, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.map(x, gelu);
        self.push(v, Op::Gelu(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let v = self.map(x, f64::abs);
        self.push(v, Op::Abs(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        let v = self.map(x, softplus);
        self.push(v, Op::Softplus(x))
    }

    /// `d[g,m,n] = sum_k w_k |f[g,m,k] - f[g,n,k]|` for `f[G,C,D]`, `w[D]`.
    pub fn pairwise_l1(&mut self, f: Var, w: Var) -> Var {
        let (vf, vw) = (self.value(f), self.value(w));
        let s = vf.shape();
        assert_eq!(s.len(), 3);
        let (groups, c, d) = (s[0], s[1], s[2]);
        assert_eq!(vw.len(), d);
        let fw = vw.data();
        let mut out = vec![0.0; groups * c * c];
        for g in 0..groups {
            let fg = &vf.data()[g * c * d..(g + 1) * c * d];
            for m in 0..c {
                for n in (m + 1)..c {
                    let (rm, rn) = (&fg[m * d..(m + 1) * d], &fg[n * d..(n + 1) * d]);
                    let dist: f64 = (0..d).map(|k| fw[k] * (rm[k] - rn[k]).abs()).sum();
                    out[g * c * c + m * c + n] = dist;
                    out[g * c * c + n * c + m] = dist;
                }
            }
        }
        let v = tensor(&[groups, c, c], out);
        self.push(v, Op::PairwiseL1 { f, w })
    }

    /// `1 / (x + eps)`
    pub fn recip_eps(&mut self, x: Var, eps: f64) -> Var {
        let v = self.map(x, |e| 1.0 / (e + eps));
        self.push(v, Op::RecipEps(x))
    }

    /// Divide each last-axis row by its maximum.
    pub fn row_max_normalize(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        let mut out = Vec::with_capacity(vx.len());
        for r in 0..vx.len() / n {
            let row = vx.row(r);
            let mx = row[argmax(row)];
            out.extend(row.iter().map(|v| v / mx));
        }
        let v = tensor(vx.shape(), out);
        self.push(v, Op::RowMaxNorm(x))
    }

    /// Relaxed Bernoulli sample `sigmoid((logit(p) + noise) / tau)` with
    /// logistic `noise`; `p` is clamped away from 0 and 1.
    pub fn gumbel_sigmoid(&mut self, p: Var, noise: &[f64], tau: f64) -> Var {
        const LO: f64 = 1e-12;
        let vp = self.value(p);
        assert_eq!(vp.len(), noise.len());
        let mut clamped = Vec::with_capacity(vp.len());
        let mut out = Vec::with_capacity(vp.len());
        for (&pv, &z) in vp.data().iter().zip(noise) {
            let c = pv.clamp(LO, 1.0 - LO);
            clamped.push(c != pv);
            let logit = libm::log(c) - libm::log1p(-c);
            out.push(sigmoid((logit + z) / tau));
        }
        let v = tensor(vp.shape(), out);
        self.push(v, Op::GumbelSigmoid { p, tau, clamped })
    }

    /// Forward value `hard`, gradient passed straight to `soft`.
    pub fn straight_through(&mut self, soft: Var, hard: Tensor) -> Var {
        assert_eq!(self.shape(soft), hard.shape());
        self.push(hard, Op::StraightThrough(soft))
    }

    /// Mean over the last axis, keeping it as size 1.
    pub fn mean_last(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let n = vx.last_dim();
        let data = (0..vx.len() / n).map(|r| vx.row(r).iter().sum::<f64>() / n as f64).collect();
        let v = tensor(&with_last(vx.shape(), 1), data);
        self.push(v, Op::MeanLast(x))
    }

    fn col(&mut self, x: Var, c: Var, kind: ColKind) -> Var {
        let (vx, vc) = (self.value(x), self.value(c));
        let n = vx.last_dim();
        assert_eq!(vx.len() / n, vc.len(), "one column value per row");
        let mut data = vx.data().to_vec();
        for (row, &cv) in data.chunks_mut(n).zip(vc.data()) {
            for e in row {
                *e = match kind {
                    ColKind::Add => *e + cv,
                    ColKind::Sub => *e - cv,
                    ColKind::Mul => *e * cv,
                    ColKind::Div => *e / cv,
                };
            }
        }
        let v = tensor(vx.shape(), data);
        self.push(v, Op::Col(x, c, kind))
    }

    /// Row-wise ops against a per-row column `c` (one value per last-axis row).
    pub fn add_col(&mut self, x: Var, c: Var) -> Var {
        self.col(x, c, ColKind::Add)
    }

    pub fn sub_col(&mut self, x: Var, c: Var) -> Var {
        self.col(x, c, ColKind::Sub)
    }

    pub fn mul_col(&mut self, x: Var, c: Var) -> Var {
        self.col(x, c, ColKind::Mul)
    }

    pub fn div_col(&mut self, x: Var, c: Var) -> Var {
        self.col(x, c, ColKind::Div)
    }

    /// `max(sqrt(v), floor)`; no gradient where the floor is active.
    pub fn clamped_sqrt(&mut self, x: Var, floor: f64) -> Var {
        let v = self.map(x, |e| libm::sqrt(e.max(0.0)).max(floor));
        self.push(v, Op::ClampedSqrt(x, floor))
    }

    /// Full DFT of each last-axis row: `[.., L] -> [.., 2L]` laid out as
    /// real bins followed by imaginary bins.
    pub fn dft(&mut self, x: Var) -> Var {
        let vx = self.value(x);
        let l = vx.last_dim();
        let rows = vx.len() / l;
        let (re, im) = fft::dft_rows(vx.data(), rows, l);
        let mut data = Vec::with_capacity(2 * vx.len());
        for r in 0..rows {
            data.extend_from_slice(&re[r * l..(r + 1) * l]);
            data.extend_from_slice(&im[r * l..(r + 1) * l]);
        }
        let v = tensor(&with_last(vx.shape(), 2 * l), data);
        self.push(v, Op::Dft(x))
    }

    /// Real part of the inverse DFT of `[.., 2L]` rows in the [`Tape::dft`] layout.
    pub fn idft(&mut self, spectrum: Var) -> Var {
        let vs = self.value(spectrum);
        let l2 = vs.last_dim();
        assert!(l2.is_multiple_of(2));
        let l = l2 / 2;
        let rows = vs.len() / l2;
        let (re, im) = split_halves(vs.data(), rows, l);
        let out = fft::idft_rows_real(&re, &im, rows, l);
        let v = tensor(&with_last(vs.shape(), l), out);
        self.push(v, Op::Idft(spectrum))
    }

    /// Mean of squared differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (self.value(a), self.value(b));
        assert_eq!(va.shape(), vb.shape(), "mse operands differ in shape");
        let n = va.len().max(1) as f64;
        let s: f64 = va.data().iter().zip(vb.data()).map(|(x, y)| (x - y) * (x - y)).sum();
        self.push(Tensor::scalar(s / n), Op::Mse(a, b))
    }

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients {
        assert_eq!(self.value(output).len(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(vec![1.0]);
        for i in (0..=output.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.node_backward(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn node_backward(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        match &node.op {
            Op::Leaf | Op::Param => {}
            Op::Reshape(x) | Op::StraightThrough(x) => accumulate(grads, *x, g.iter().copied()),
            Op::Add(a, b) => {
                accumulate(grads, *a, g.iter().copied());
                accumulate(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                accumulate(grads, *a, g.iter().copied());
                accumulate(grads, *b, g.iter().map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                accumulate(grads, *a, g.iter().zip(vb).map(|(g, y)| g * y));
                accumulate(grads, *b, g.iter().zip(va).map(|(g, x)| g * x));
            }
            Op::Scale(x, k) => accumulate(grads, *x, g.iter().map(|v| v * k)),
            Op::MulConst(x, c) => accumulate(grads, *x, g.iter().zip(c.iter()).map(|(g, c)| g * c)),
            Op::DotConst(x, c) => accumulate(grads, *x, c.iter().map(|c| g[0] * c)),
            Op::AddBias(x, b) => {
                accumulate(grads, *x, g.iter().copied());
                let n = self.nodes[b.0].value.len();
                let mut db = vec![0.0; n];
                for row in g.chunks(n) {
                    for (d, v) in db.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                accumulate(grads, *b, db.into_iter());
            }
            Op::MatMul(x, w) => {
                let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
                let (k, n) = (vw.shape()[0], vw.shape()[1]);
                let rows = vx.len() / k;
                let dx = grad_slot(grads, *x, vx.len());
                matmul_nt_acc(g, vw.data(), dx, rows, n, k);
                let dw = grad_slot(grads, *w, vw.len());
                matmul_tn_acc(vx.data(), g, dw, rows, k, n);
            }
            Op::Bmm { a, b, groups, m, k, n, trans_b } => {
                let (groups, m, k, n) = (*groups, *m, *k, *n);
                let (va, vb) = (val(*a), val(*b));
                {
                    let da = grad_slot(grads, *a, va.len());
                    for gi in 0..groups {
                        let gg = &g[gi * m * n..(gi + 1) * m * n];
                        let bg = &vb[gi * k * n..(gi + 1) * k * n];
                        let dag = &mut da[gi * m * k..(gi + 1) * m * k];
                        if *trans_b {
                            // a[m,k] = g[m,n] b[n,k]
                            matmul_acc(gg, bg, dag, m, n, k);
                        } else {
                            matmul_nt_acc(gg, bg, dag, m, n, k);
                        }
                    }
                }
                let db = grad_slot(grads, *b, vb.len());
                for gi in 0..groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    let ag = &va[gi * m * k..(gi + 1) * m * k];
                    let dbg = &mut db[gi * k * n..(gi + 1) * k * n];
                    if *trans_b {
                        // db[n,k] = g^T[n,m] a[m,k]
                        matmul_tn_acc(gg, ag, dbg, m, n, k);
                    } else {
                        matmul_tn_acc(ag, gg, dbg, m, k, n);
                    }
                }
            }
            Op::Gather(x, index) => {
                let n = self.nodes[x.0].value.len();
                let dx = grad_slot(grads, *x, n);
                for (&src, &gv) in index.iter().zip(g) {
                    dx[src] += gv;
                }
            }
            Op::Concat(a, b) => {
                let (na, nb) = (self.nodes[a.0].value.last_dim(), self.nodes[b.0].value.last_dim());
                let rows = g.len() / (na + nb);
                let mut ga = Vec::with_capacity(rows * na);
                let mut gb = Vec::with_capacity(rows * nb);
                for r in 0..rows {
                    let row = &g[r * (na + nb)..(r + 1) * (na + nb)];
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                accumulate(grads, *a, ga.into_iter());
                accumulate(grads, *b, gb.into_iter());
            }
            Op::Softmax { logits, mask, heads, block } => {
                let out = node.value.data();
                let vl = &self.nodes[logits.0].value;
                let t = vl.last_dim();
                let mut dl = vec![0.0; vl.len()];
                let mut dm = mask.map(|m| vec![0.0; self.nodes[m.0].value.len()]);
                let mvals = mask.map(&val);
                for r in 0..vl.len() / t {
                    let span = r * t..(r + 1) * t;
                    let (a, gr) = (&out[span.clone()], &g[span.clone()]);
                    let s: f64 = a.iter().zip(gr).map(|(a, g)| a * g).sum();
                    for j in 0..t {
                        dl[r * t + j] = a[j] * (gr[j] - s);
                    }
                    if let (Some(dm), Some(mv)) = (dm.as_mut(), mvals) {
                        let base = (r * t / (heads * block)) * block + (r * t % block);
                        let mrow = &mv[base..base + t];
                        let u = unmasked_weights(vl.row(r), mrow);
                        for j in 0..t {
                            dm[base + j] += u[j] * (gr[j] - s);
                        }
                    }
                }
                accumulate(grads, *logits, dl.into_iter());
                if let (Some(m), Some(dm)) = (mask, dm) {
                    accumulate(grads, *m, dm.into_iter());
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let gam = val(*gamma);
                let n = gam.len();
                let mut dx = vec![0.0; xhat.len()];
                let mut dg = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                for (r, &rs) in rstd.iter().enumerate() {
                    let span = r * n..(r + 1) * n;
                    let (gr, xh) = (&g[span.clone()], &xhat[span.clone()]);
                    let mut mean_d = 0.0;
                    let mut mean_dx = 0.0;
                    for j in 0..n {
                        let d = gr[j] * gam[j];
                        mean_d += d;
                        mean_dx += d * xh[j];
                        dg[j] += gr[j] * xh[j];
                        dbeta[j] += gr[j];
                    }
                    mean_d /= n as f64;
                    mean_dx /= n as f64;
                    for j in 0..n {
                        let d = gr[j] * gam[j];
                        dx[r * n + j] = rs * (d - mean_d - xh[j] * mean_dx);
                    }
                }
                accumulate(grads, *x, dx.into_iter());
                accumulate(grads, *gamma, dg.into_iter());
                accumulate(grads, *beta, dbeta.into_iter());
            }
            Op::Gelu(x) => accumulate(grads, *x, g.iter().zip(val(*x)).map(|(g, &v)| g * gelu_grad(v))),
            Op::Abs(x) => accumulate(grads, *x, g.iter().zip(val(*x)).map(|(g, &v)| g * sign(v))),
            Op::Softplus(x) => accumulate(grads, *x, g.iter().zip(val(*x)).map(|(g, &v)| g * sigmoid(v))),
            Op::PairwiseL1 { f, w } => {
                let vf = &self.nodes[f.0].value;
                let (groups, c, d) = (vf.shape()[0], vf.shape()[1], vf.shape()[2]);
                let fw = val(*w);
                let mut df = vec![0.0; vf.len()];
                let mut dw = vec![0.0; d];
                for gi in 0..groups {
                    let fg = &vf.data()[gi * c * d..(gi + 1) * c * d];
                    for m in 0..c {
                        for n in 0..c {
                            if m == n {
                                continue;
                            }
                            let gv = g[gi * c * c + m * c + n];
                            if gv == 0.0 {
                                continue;
                            }
                            for k in 0..d {
                                let diff = fg[m * d + k] - fg[n * d + k];
                                dw[k] += gv * diff.abs();
                                let s = gv * fw[k] * sign(diff);
                                df[gi * c * d + m * d + k] += s;
                                df[gi * c * d + n * d + k] -= s;
                            }
                        }
                    }
                }
                accumulate(grads, *f, df.into_iter());
                accumulate(grads, *w, dw.into_iter());
            }
            Op::RecipEps(x) => {
                let out = node.value.data();
                accumulate(grads, *x, g.iter().zip(out).map(|(g, y)| -g * y * y));
            }
            Op::RowMaxNorm(x) => {
                let vx = &self.nodes[x.0].value;
                let n = vx.last_dim();
                let mut dx = vec![0.0; vx.len()];
                for r in 0..vx.len() / n {
                    let row = vx.row(r);
                    let a = argmax(row);
                    let mx = row[a];
                    let gr = &g[r * n..(r + 1) * n];
                    let mut acc = 0.0;
                    for j in 0..n {
                        dx[r * n + j] += gr[j] / mx;
                        acc += gr[j] * row[j];
                    }
                    dx[r * n + a] -= acc / (mx * mx);
                }
                accumulate(grads, *x, dx.into_iter());
            }
            Op::GumbelSigmoid { p, tau, clamped } => {
                let out = node.value.data();
                let vp = val(*p);
                let it = g.iter().zip(out).zip(vp).zip(clamped).map(|(((g, y), &pv), &cl)| {
                    if cl {
                        0.0
                    } else {
                        g * y * (1.0 - y) / tau * (1.0 / pv + 1.0 / (1.0 - pv))
                    }
                });
                accumulate(grads, *p, it);
            }
            Op::MeanLast(x) => {
                let vx = &self.nodes[x.0].value;
                let n = vx.last_dim();
                let it = (0..vx.len()).map(|i| g[i / n] / n as f64);
                accumulate(grads, *x, it);
            }
            Op::Col(x, c, kind) => {
                let (vx, vc) = (&self.nodes[x.0].value, val(*c));
                let n = vx.last_dim();
                let mut dx = vec![0.0; vx.len()];
                let mut dc = vec![0.0; vc.len()];
                for (r, &cv) in vc.iter().enumerate() {
                    for j in r * n..(r + 1) * n {
                        let (gv, xv) = (g[j], vx.data()[j]);
                        match kind {
                            ColKind::Add => {
                                dx[j] = gv;
                                dc[r] += gv;
                            }
                            ColKind::Sub => {
                                dx[j] = gv;
                                dc[r] -= gv;
                            }
                            ColKind::Mul => {
                                dx[j] = gv * cv;
                                dc[r] += gv * xv;
                            }
                            ColKind::Div => {
                                dx[j] = gv / cv;
                                dc[r] -= gv * xv / (cv * cv);
                            }
                        }
                    }
                }
                accumulate(grads, *x, dx.into_iter());
                accumulate(grads, *c, dc.into_iter());
            }
            Op::ClampedSqrt(x, floor) => {
                let out = node.value.data();
                let it = g.iter().zip(out).map(|(g, &y)| if y > *floor { g * 0.5 / y } else { 0.0 });
                accumulate(grads, *x, it);
            }
            Op::Dft(x) => {
                let vx = &self.nodes[x.0].value;
                let l = vx.last_dim();
                let rows = vx.len() / l;
                let (gr, gi) = split_halves(g, rows, l);
                let dx = fft::dft_adjoint_rows(&gr, &gi, rows, l);
                accumulate(grads, *x, dx.into_iter());
            }
            Op::Idft(s) => {
                let l = node.value.last_dim();
                let rows = node.value.len() / l;
                let (re, im) = fft::dft_rows(g, rows, l);
                let inv = 1.0 / l as f64;
                let mut ds = Vec::with_capacity(2 * g.len());
                for r in 0..rows {
                    ds.extend(re[r * l..(r + 1) * l].iter().map(|v| v * inv));
                    ds.extend(im[r * l..(r + 1) * l].iter().map(|v| v * inv));
                }
                accumulate(grads, *s, ds.into_iter());
            }
            Op::Mse(a, b) => {
                let (va, vb) = (val(*a), val(*b));
                let k = 2.0 * g[0] / va.len().max(1) as f64;
                let d: Vec<f64> = va.iter().zip(vb).map(|(x, y)| k * (x - y)).collect();
                accumulate(grads, *b, d.iter().map(|v| -v));
                accumulate(grads, *a, d.into_iter());
            }
        }
    }
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = j;
        }
    }
    best
}

fn split_halves(data: &[f64], rows: usize, l: usize) -> (Vec<f64>, Vec<f64>) {
    let mut re = Vec::with_capacity(rows * l);
    let mut im = Vec::with_capacity(rows * l);
    for r in 0..rows {
        re.extend_from_slice(&data[2 * r * l..(2 * r + 1) * l]);
        im.extend_from_slice(&data[(2 * r + 1) * l..(2 * r + 2) * l]);
    }
    (re, im)
}

/// Shift for a numerically safe exponent: the largest logit among entries
/// that carry mask weight.
fn row_shift(logits: &[f64], mask: Option<&[f64]>) -> f64 {
    let mut mx = f64::NEG_INFINITY;
    for (j, &l) in logits.iter().enumerate() {
        let live = mask.is_none_or(|m| m[j] > 0.0);
        if live && l > mx {
            mx = l;
        }
    }
    if mx.is_finite() {
        mx
    } else {
        0.0
    }
}

fn softmax_row(logits: &[f64], mask: Option<&[f64]>, out: &mut [f64]) {
    let mx = row_shift(logits, mask);
    let mut z = 0.0;
    for (j, o) in out.iter_mut().enumerate() {
        let m = mask.map_or(1.0, |m| m[j]);
        *o = if m == 0.0 { 0.0 } else { m * libm::exp(logits[j] - mx) };
        z += *o;
    }
    if z > 0.0 {
        out.iter_mut().for_each(|o| *o /= z);
    }
}

/// `exp(l_j) / sum_k m_k exp(l_k)`, the derivative of the masked softmax
/// with respect to mask entry `j` before the output correction.
fn unmasked_weights(logits: &[f64], mask: &[f64]) -> Vec<f64> {
    let mx = row_shift(logits, Some(mask));
    let e: Vec<f64> = logits.iter().map(|l| libm::exp((l - mx).min(700.0))).collect();
    let z: f64 = e.iter().zip(mask).map(|(e, m)| e * m).sum();
    if z > 0.0 {
        e.into_iter().map(|v| v / z).collect()
    } else {
        vec![0.0; logits.len()]
    }
}

fn grad_slot(grads: &mut [Option<Vec<f64>>], v: Var, len: usize) -> &mut [f64] {
    grads[v.0].get_or_insert_with(|| vec![0.0; len]).as_mut_slice()
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, it: impl Iterator<Item = f64>) {
    match &mut grads[v.0] {
        Some(existing) => {
            for (e, x) in existing.iter_mut().zip(it) {
                *e += x;
            }
        }
        slot @ None => *slot = Some(it.collect()),
    }
}

/// Result of [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of every stored parameter; untouched ones are zero.
    pub fn param_grads(&self, tape: &Tape<'_>) -> Grads {
        let mut out = Grads::zeros_like(tape.params);
        for (&id, &var) in &tape.param_vars {
            if let Some(g) = self.wrt(var) {
                out.tensors[id.index()].data_mut().copy_from_slice(g);
            }
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    #[test]
    fn straight_through_passes_the_soft_gradient() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let x = tape.constant(Tensor::new(&[3], vec![0.2, 0.6, 0.9]).unwrap());
        let soft = tape.scale(x, 2.0);
        let hard = Tensor::new(&[3], vec![0.0, 1.0, 1.0]).unwrap();
        let y = tape.straight_through(soft, hard);
        assert_eq!(tape.value(y).data(), [0.0, 1.0, 1.0]);
        let s = tape.dot_const(y, vec![1.0, 2.0, 3.0].into());
        let g = tape.backward(s);
        assert_eq!(g.wrt(x).unwrap(), [2.0, 4.0, 6.0]);
    }

    #[test]
    fn zero_mask_gives_exact_zero_weight() {
        let store = ParamStore::new();
        let mut tape = Tape::new(&store);
        let logits = tape.constant(Tensor::new(&[1, 1, 2, 2], vec![5.0, 100.0, -3.0, 2.0]).unwrap());
        let mask = tape.constant(Tensor::new(&[1, 2, 2], vec![1.0, 0.0, 1.0, 1.0]).unwrap());
        let a = tape.masked_softmax(logits, Some(mask), 1);
        let v = tape.value(a).data();
        assert_eq!(v[0], 1.0);
        assert_eq!(v[1], 0.0);
        assert!((v[2] + v[3] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn param_grads_for_linear_and_layer_norm() {
        let mut store = ParamStore::new();
        let mut r = rng::seeded(20);
        let w = store.add_uniform("w", &[3, 2], 3, &mut r);
        let b = store.add_uniform("b", &[2], 3, &mut r);
        let gamma = store.add_uniform("g", &[2], 1, &mut r);
        let beta = store.add_uniform("be", &[2], 1, &mut r);
        let x = Tensor::new(&[4, 3], (0..12).map(|i| (i as f64).cos()).collect()).unwrap();
        let loss = |s: &ParamStore| -> (f64, Grads) {
            let mut t = Tape::new(s);
            let xv = t.constant(x.clone());
            let (wv, bv, gv, bev) = (t.param(w), t.param(b), t.param(gamma), t.param(beta));
            let h = t.matmul(xv, wv);
            let h = t.add_bias(h, bv);
            let h = t.layer_norm(h, gv, bev);
            let target = t.constant(Tensor::full(&[4, 2], 0.3));
            let l = t.mse(h, target);
            let g = t.backward(l);
            (t.value(l).data()[0], g.param_grads(&t))
        };
        let (_, grads) = loss(&store);
        for id in store.ids() {
            for i in 0..store.get(id).len() {
                let mut sp = store.clone();
                sp.get_mut(id).data_mut()[i] += 1e-5;
                let mut sm = store.clone();
                sm.get_mut(id).data_mut()[i] -= 1e-5;
                let fd = (loss(&sp).0 - loss(&sm).0) / 2e-5;
                let an = grads.get(id).data()[i];
                assert!((fd - an).abs() <= 1e-6 * fd.abs().max(1.0), "{} {i}: {fd} vs {an}", store.name(id));
            }
        }
    }
}
