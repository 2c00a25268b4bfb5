//! Reverse-mode differentiation tape.
//!
//! Every differentiable op appends a node holding its output value and the
//! ids of its inputs. [`Graph::backward`] walks the nodes in reverse
//! insertion order and sums gradient contributions into each input.

use rand::Rng;

use crate::error::{Error, Result};

use super::conv::{self, ConvGeom};
use super::params::{ParamId, ParamStore};
use super::resize;
use super::{Array, Real};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch-norm statistics source.
#[derive(Clone, Debug)]
pub enum BnMode<'a, F> {
    /// Normalize by batch statistics; the op returns them.
    Train,
    /// Normalize by stored running statistics.
    Eval { mean: &'a [F], var: &'a [F] },
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddBcast(Var, Var),
    Affine(Var, F),
    MulScalar(Var, Var),
    Tanh(Var),
    Relu(Var),
    Gelu(Var),
    LnClamp(Var, F),
    Powf(Var, F),
    MatMul {
        a: Var,
        b: Var,
        tb: bool,
    },
    Permute(Var, Vec<usize>),
    Reshape(Var),
    Concat(Vec<Var>, usize),
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    ExpandLeading(Var),
    MeanAxis(Var, usize),
    SumAll(Var),
    MeanAll(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
        train: bool,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Dropout(Var, Vec<F>),
    Gather(Var, Vec<usize>),
    Resize(Var),
}

#[derive(Debug)]
struct Node<F> {
    value: Array<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Computation tape for one forward/backward pass.
#[derive(Debug, Default)]
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Array<F>>>,
    params: Vec<(Var, ParamId)>,
}

/// Split `shape` around `axis` into (outer, dim, inner) extents.
fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn add_into<F: Real>(dst: &mut [F], src: &[F]) {
    for (d, &s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn permute_data<F: Real>(data: &[F], shape: &[usize], perm: &[usize]) -> (Vec<F>, Vec<usize>) {
    let nd = shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let mut in_strides = vec![1usize; nd];
    for i in (0..nd.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    if data.is_empty() {
        return (out, out_shape);
    }
    // innermost output axis is walked contiguously in the output
    let last = nd - 1;
    let (n_last, s_last) = (out_shape[last], strides[last]);
    let mut idx = vec![0usize; nd];
    let mut base = 0usize;
    loop {
        for j in 0..n_last {
            out.push(data[base + j * s_last]);
        }
        let mut ax = last;
        loop {
            if ax == 0 {
                return (out, out_shape);
            }
            ax -= 1;
            idx[ax] += 1;
            base += strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn gelu_parts<F: Real>(x: F) -> (F, F) {
    let c = F::from_f64_lossy((2.0 / std::f64::consts::PI).sqrt());
    let k = F::from_f64_lossy(0.044715);
    let half = F::from_f64_lossy(0.5);
    let three = F::from_f64_lossy(3.0);
    let inner = c * (x + k * x * x * x);
    let t = inner.tanh();
    let y = half * x * (F::one() + t);
    let dy =
        half * (F::one() + t) + half * x * (F::one() - t * t) * c * (F::one() + three * k * x * x);
    (y, dy)
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            params: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array<F>, op: Op<F>, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Array<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last `backward` loss w.r.t. a leaf.
    pub fn grad(&self, v: Var) -> Option<&Array<F>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn constant(&mut self, value: Array<F>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Array<F>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// Bind a stored parameter as a leaf; its gradient is routed back by
    /// [`Graph::accumulate_param_grads`].
    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf, store.is_trainable(id));
        self.params.push((v, id));
        v
    }

    pub fn accumulate_param_grads(&self, store: &mut ParamStore<F>) {
        for &(v, id) in &self.params {
            if let Some(g) = self.grad(v) {
                store.add_grad(id, g.data());
            }
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(F, F) -> F) -> Array<F> {
        let va = self.value(a);
        let vb = self.value(b);
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Array::new(va.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.zip_map(a, b, |x, y| x + y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.zip_map(a, b, |x, y| x - y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.zip_map(a, b, |x, y| x * y);
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::Mul(a, b), ng))
    }

    /// `a + b` where `b`'s shape is a suffix of `a`'s (bias, positional table).
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add_bcast", sa, sb));
        }
        let n = self.value(b).numel().max(1);
        let mut out = self.value(a).clone();
        let bd = self.value(b).data().to_vec();
        for chunk in out.data_mut().chunks_mut(n) {
            add_into(chunk, &bd);
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::AddBcast(a, b), ng))
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: F, shift: F) -> Var {
        let v = self.value(x).map(|t| scale * t + shift);
        let ng = self.ng(x);
        self.push(v, Op::Affine(x, scale), ng)
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.affine(x, s, F::zero())
    }

    /// `x · s` with `s` a single-element var.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.value(s).numel() != 1 {
            return Err(Error::dim("mul_scalar", self.shape(x), self.shape(s)));
        }
        let sv = self.value(s).data()[0];
        let v = self.value(x).map(|t| t * sv);
        let ng = self.ng(x) || self.ng(s);
        Ok(self.push(v, Op::MulScalar(x, s), ng))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.tanh());
        let ng = self.ng(x);
        self.push(v, Op::Tanh(x), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| t.max(F::zero()));
        let ng = self.ng(x);
        self.push(v, Op::Relu(x), ng)
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|t| gelu_parts(t).0);
        let ng = self.ng(x);
        self.push(v, Op::Gelu(x), ng)
    }

    /// `ln(max(x, floor))`.
    pub fn ln_clamped(&mut self, x: Var, floor: F) -> Var {
        let v = self.value(x).map(|t| t.max(floor).ln());
        let ng = self.ng(x);
        self.push(v, Op::LnClamp(x, floor), ng)
    }

    /// `max(x, 0)^p`.
    pub fn powf(&mut self, x: Var, p: F) -> Var {
        let v = self.value(x).map(|t| t.max(F::zero()).powf(p));
        let ng = self.ng(x);
        self.push(v, Op::Powf(x, p), ng)
    }

    /// Batched matrix product. `a: [.., m, k]`. `b` is either `[k, n]`
    /// (shared across the batch) or `[.., k, n]` with the same leading dims
    /// as `a`. With `tb`, `b` holds the transpose (`[.., n, k]`).
    pub fn matmul(&mut self, a: Var, b: Var, tb: bool) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if tb {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        let shared = sb.len() == 2;
        if k != kb || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let mut out_shape = sa[..sa.len() - 2].to_vec();
        out_shape.extend([m, n]);
        let mut out = vec![F::zero(); batch * m * n];
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        if shared {
            F::gemm(batch * m, k, n, ad, false, bd, tb, F::zero(), &mut out);
        } else {
            for i in 0..batch {
                F::gemm(
                    m,
                    k,
                    n,
                    &ad[i * m * k..(i + 1) * m * k],
                    false,
                    &bd[i * k * n..(i + 1) * k * n],
                    tb,
                    F::zero(),
                    &mut out[i * m * n..(i + 1) * m * n],
                );
            }
        }
        let v = Array::new(out_shape, out)?;
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(v, Op::MatMul { a, b, tb }, ng))
    }

    /// `x · wᵀ + b` for `x: [.., in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let inner = *shape
            .last()
            .ok_or_else(|| Error::dim("linear", &shape, &[]))?;
        let rows = self.value(x).numel() / inner.max(1);
        let x2 = self.reshape(x, &[rows, inner])?;
        let y = self.matmul(x2, w, true)?;
        let y = match b {
            Some(b) => self.add_bcast(y, b)?,
            None => y,
        };
        let mut out_shape = shape;
        let last = out_shape.len() - 1;
        out_shape[last] = self.shape(y)[1];
        self.reshape(y, &out_shape)
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm
                .iter()
                .any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::dim("permute", &shape, perm));
        }
        let (data, out_shape) = permute_data(self.value(x).data(), &shape, perm);
        let v = Array::new(out_shape, data)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Permute(x, perm.to_vec()), ng))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let first = *xs
            .first()
            .ok_or_else(|| Error::contract("concat of zero vars"))?;
        let base = self.shape(first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim("concat", &base, &[axis]));
        }
        let mut total = 0;
        for &x in xs {
            let s = self.shape(x);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::dim("concat", &base, s));
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &x in xs {
                let d = self.shape(x)[axis] * inner;
                out.extend_from_slice(&self.value(x).data()[o * d..(o + 1) * d]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let v = Array::new(shape, out)?;
        let ng = xs.iter().any(|&x| self.ng(x));
        Ok(self.push(v, Op::Concat(xs.to_vec(), axis), ng))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::dim("slice", &shape, &[axis, start, len]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * dim + start) * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut s = shape;
        s[axis] = len;
        let v = Array::new(s, out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Slice { x, axis, start }, ng))
    }

    /// Repeat `x` `n` times along a new leading axis.
    pub fn expand_leading(&mut self, x: Var, n: usize) -> Var {
        let src = self.value(x);
        let mut data = Vec::with_capacity(src.numel() * n);
        for _ in 0..n {
            data.extend_from_slice(src.data());
        }
        let mut shape = vec![n];
        shape.extend_from_slice(src.shape());
        let v = Array::new(shape, data).expect("shape");
        let ng = self.ng(x);
        self.push(v, Op::ExpandLeading(x), ng)
    }

    /// Mean over one axis (the axis is removed).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || shape[axis] == 0 {
            return Err(Error::dim("mean_axis", &shape, &[axis]));
        }
        let (outer, dim, inner) = split_axis(&shape, axis);
        let src = self.value(x).data();
        let inv = F::one() / F::from_usize(dim).expect("dim");
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            let dst = &mut out[o * inner..(o + 1) * inner];
            for d in 0..dim {
                add_into(dst, &src[(o * dim + d) * inner..(o * dim + d + 1) * inner]);
            }
            dst.iter_mut().for_each(|v| *v = *v * inv);
        }
        let mut s = shape;
        s.remove(axis);
        let v = Array::new(s, out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::MeanAxis(x, axis), ng))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let v = Array::scalar(self.value(x).sum());
        let ng = self.ng(x);
        self.push(v, Op::SumAll(x), ng)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = F::from_usize(self.value(x).numel().max(1)).expect("count");
        let v = Array::scalar(self.value(x).sum() / n);
        let ng = self.ng(x);
        self.push(v, Op::MeanAll(x), ng)
    }

    /// Softmax over the last axis with max subtraction.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        if !xv.is_finite() {
            return Err(Error::Numeric("non-finite softmax input".into()));
        }
        let n = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax", xv.shape(), &[]))?;
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let m = row.iter().copied().fold(F::neg_infinity(), F::max);
            let mut s = F::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            let inv = F::one() / s;
            row.iter_mut().for_each(|v| *v = *v * inv);
        }
        let ng = self.ng(x);
        Ok(self.push(out, Op::Softmax(x), ng))
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: F) -> Result<Var> {
        let xv = self.value(x);
        let d = *xv
            .shape()
            .last()
            .ok_or_else(|| Error::dim("layer_norm", xv.shape(), &[]))?;
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", xv.shape(), self.shape(gamma)));
        }
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let fd = F::from_usize(d).expect("d");
        let rows = xv.numel() / d;
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        let mut out = Vec::with_capacity(xv.numel());
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<F>() / fd;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / fd;
            let r = F::one() / (var + eps).sqrt();
            rstd.push(r);
            for (j, &v) in row.iter().enumerate() {
                let h = (v - mean) * r;
                xhat.push(h);
                out.push(h * g[j] + b[j]);
            }
        }
        let v = Array::new(xv.shape().to_vec(), out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            v,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Batch normalization of `[N, C, H, W]` per channel. In train mode the
    /// returned stats are the batch mean and biased variance.
    #[allow(clippy::type_complexity)]
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: BnMode<'_, F>,
        eps: F,
    ) -> Result<(Var, Option<(Vec<F>, Vec<F>)>)> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 4 || self.shape(gamma) != [shape[1]] || self.shape(beta) != [shape[1]] {
            return Err(Error::dim("batch_norm", &shape, self.shape(gamma)));
        }
        let (n, c, plane) = (shape[0], shape[1], shape[2] * shape[3]);
        let count = n * plane;
        let xd = self.value(x).data();
        let (mean, var, train) = match mode {
            BnMode::Train => {
                if count < 2 {
                    return Err(Error::contract(format!(
                        "batch_norm train mode needs at least 2 values per channel, got {count}"
                    )));
                }
                let fc = F::from_usize(count).expect("count");
                let mut mean = vec![F::zero(); c];
                let mut var = vec![F::zero(); c];
                for ch in 0..c {
                    let mut s = F::zero();
                    for b in 0..n {
                        s = s + xd[(b * c + ch) * plane..(b * c + ch + 1) * plane]
                            .iter()
                            .copied()
                            .sum();
                    }
                    let m = s / fc;
                    let mut q = F::zero();
                    for b in 0..n {
                        for &v in &xd[(b * c + ch) * plane..(b * c + ch + 1) * plane] {
                            q = q + (v - m) * (v - m);
                        }
                    }
                    mean[ch] = m;
                    var[ch] = q / fc;
                }
                (mean, var, true)
            }
            BnMode::Eval { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::dim("batch_norm", &shape, &[mean.len()]));
                }
                (mean.to_vec(), var.to_vec(), false)
            }
        };
        let rstd: Vec<F> = var.iter().map(|&v| F::one() / (v + eps).sqrt()).collect();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut xhat = vec![F::zero(); xd.len()];
        let mut out = vec![F::zero(); xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * plane..(b * c + ch + 1) * plane;
                for i in r {
                    let h = (xd[i] - mean[ch]) * rstd[ch];
                    xhat[i] = h;
                    out[i] = h * g[ch] + bt[ch];
                }
            }
        }
        let v = Array::new(shape, out)?;
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        let var_out = self.push(
            v,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            },
            ng,
        );
        Ok((var_out, train.then_some((mean, var))))
    }

    /// 2-D convolution, `x: [B, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, zero padding.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || stride == 0 {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        if let Some(b) = b {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim("conv2d", &ws, self.shape(b)));
            }
        }
        if xs[2] + 2 * pad < ws[2] || xs[3] + 2 * pad < ws[3] {
            return Err(Error::dim("conv2d", &xs, &ws));
        }
        let geom = ConvGeom {
            cin: xs[1],
            h: xs[2],
            w: xs[3],
            cout: ws[0],
            kh: ws[2],
            kw: ws[3],
            stride,
            pad,
        };
        let (ho, wo) = geom.out_hw();
        let out = conv::conv2d_forward(
            &geom,
            xs[0],
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let v = Array::new(vec![xs[0], ws[0], ho, wo], out)?;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(v, Op::Conv2d { x, w, b, geom }, ng))
    }

    /// Inverted dropout: kept entries are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut impl Rng) -> Var {
        if rate <= 0.0 {
            return x;
        }
        let keep = F::from_f64_lossy(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).numel())
            .map(|_| {
                if rng.gen::<f64>() < rate {
                    F::zero()
                } else {
                    keep
                }
            })
            .collect();
        let xv = self.value(x);
        let data = xv.data().iter().zip(&mask).map(|(&a, &m)| a * m).collect();
        let v = Array::new(xv.shape().to_vec(), data).expect("shape");
        let ng = self.ng(x);
        self.push(v, Op::Dropout(x, mask), ng)
    }

    /// `out[i] = x[i, idx[i]]` for `x: [B, M]`.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != idx.len() {
            return Err(Error::dim("gather_rows", &s, &[idx.len()]));
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= s[1]) {
            return Err(Error::contract(format!(
                "index {bad} out of range for {} columns",
                s[1]
            )));
        }
        let xd = self.value(x).data();
        let data = idx
            .iter()
            .enumerate()
            .map(|(r, &c)| xd[r * s[1] + c])
            .collect();
        let v = Array::new(vec![idx.len()], data)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Gather(x, idx.to_vec()), ng))
    }

    /// Bilinear (align-corners) resize of the trailing two axes.
    pub fn bilinear_resize(&mut self, x: Var, oh: usize, ow: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || oh == 0 || ow == 0 || s[s.len() - 1] == 0 || s[s.len() - 2] == 0 {
            return Err(Error::dim("bilinear_resize", &s, &[oh, ow]));
        }
        let (h, w) = (s[s.len() - 2], s[s.len() - 1]);
        let out = resize::bilinear_forward(self.value(x).data(), h, w, oh, ow);
        let mut shape = s;
        let nd = shape.len();
        shape[nd - 2] = oh;
        shape[nd - 1] = ow;
        let v = Array::new(shape, out)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Resize(x), ng))
    }

    fn accum(&mut self, v: Var, g: &[F]) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => add_into(buf.data_mut(), g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Array::new(shape, g.to_vec()).expect("grad shape"));
            }
        }
    }

    fn accum_owned(&mut self, v: Var, g: Vec<F>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut self.grads[v.0] {
            Some(buf) => add_into(buf.data_mut(), &g),
            slot @ None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                *slot = Some(Array::new(shape, g).expect("grad shape"));
            }
        }
    }

    /// Populate gradients of a scalar `loss` w.r.t. every node that needs
    /// one. Intermediate gradients are released as the walk passes them;
    /// leaf gradients stay readable via [`Graph::grad`].
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(Error::contract("backward on an empty tape"));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Array::full(shape, F::one()));
        for i in (0..=loss.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backward_node(i, g.data());
        }
        Ok(())
    }

    fn backward_node(&mut self, i: usize, g: &[F]) {
        // Temporarily move the op out so node values can be borrowed freely.
        let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accum(*a, g);
                self.accum(*b, g);
            }
            Op::Sub(a, b) => {
                self.accum(*a, g);
                let neg: Vec<F> = g.iter().map(|&v| -v).collect();
                self.accum_owned(*b, neg);
            }
            Op::Mul(a, b) => {
                let ga: Vec<F> = g
                    .iter()
                    .zip(self.value(*b).data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                let gb: Vec<F> = g
                    .iter()
                    .zip(self.value(*a).data())
                    .map(|(&x, &y)| x * y)
                    .collect();
                self.accum_owned(*a, ga);
                self.accum_owned(*b, gb);
            }
            Op::AddBcast(a, b) => {
                self.accum(*a, g);
                if self.ng(*b) {
                    let n = self.value(*b).numel().max(1);
                    let mut gb = vec![F::zero(); n];
                    for chunk in g.chunks(n) {
                        add_into(&mut gb, chunk);
                    }
                    self.accum_owned(*b, gb);
                }
            }
            Op::Affine(x, s) => {
                let gx = g.iter().map(|&v| v * *s).collect();
                self.accum_owned(*x, gx);
            }
            Op::MulScalar(x, s) => {
                let sv = self.value(*s).data()[0];
                let gs: F = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&a, &b)| a * b)
                    .sum();
                let gx = g.iter().map(|&v| v * sv).collect();
                self.accum_owned(*x, gx);
                self.accum_owned(*s, vec![gs]);
            }
            Op::Tanh(x) => {
                let y = &self.nodes[i].value;
                let gx = g
                    .iter()
                    .zip(y.data())
                    .map(|(&d, &t)| d * (F::one() - t * t))
                    .collect();
                self.accum_owned(*x, gx);
            }
            Op::Relu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > F::zero() { d } else { F::zero() })
                    .collect();
                self.accum_owned(*x, gx);
            }
            Op::Gelu(x) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| d * gelu_parts(v).1)
                    .collect();
                self.accum_owned(*x, gx);
            }
            Op::LnClamp(x, floor) => {
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| if v > *floor { d / v } else { F::zero() })
                    .collect();
                self.accum_owned(*x, gx);
            }
            Op::Powf(x, p) => {
                let p = *p;
                let gx = g
                    .iter()
                    .zip(self.value(*x).data())
                    .map(|(&d, &v)| {
                        if p == F::zero() {
                            F::zero()
                        } else if v > F::zero() {
                            d * p * v.powf(p - F::one())
                        } else if p == F::one() {
                            d
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                self.accum_owned(*x, gx);
            }
            Op::MatMul { a, b, tb } => self.backward_matmul(*a, *b, *tb, g),
            Op::Permute(x, perm) => {
                let mut inv = vec![0; perm.len()];
                for (k, &p) in perm.iter().enumerate() {
                    inv[p] = k;
                }
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (gx, _) = permute_data(g, &out_shape, &inv);
                self.accum_owned(*x, gx);
            }
            Op::Reshape(x) => self.accum(*x, g),
            Op::Resize(x) => {
                let s = self.shape(*x).to_vec();
                let o = self.nodes[i].value.shape().to_vec();
                let nd = s.len();
                let gx = resize::bilinear_backward(g, s[nd - 2], s[nd - 1], o[nd - 2], o[nd - 1]);
                self.accum_owned(*x, gx);
            }
            Op::Concat(xs, axis) => {
                let out_shape = self.nodes[i].value.shape().to_vec();
                let (outer, total, inner) = split_axis(&out_shape, *axis);
                let mut offset = 0;
                for &x in xs {
                    let d = self.shape(x)[*axis];
                    if self.ng(x) {
                        let mut gx = Vec::with_capacity(outer * d * inner);
                        for o in 0..outer {
                            let base = (o * total + offset) * inner;
                            gx.extend_from_slice(&g[base..base + d * inner]);
                        }
                        self.accum_owned(x, gx);
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&in_shape, *axis);
                let len = self.nodes[i].value.shape()[*axis];
                let mut gx = vec![F::zero(); self.value(*x).numel()];
                for o in 0..outer {
                    let dst = (o * dim + start) * inner;
                    gx[dst..dst + len * inner]
                        .copy_from_slice(&g[o * len * inner..(o + 1) * len * inner]);
                }
                self.accum_owned(*x, gx);
            }
            Op::ExpandLeading(x) => {
                let n = self.value(*x).numel();
                let mut gx = vec![F::zero(); n];
                for chunk in g.chunks(n.max(1)) {
                    add_into(&mut gx, chunk);
                }
                self.accum_owned(*x, gx);
            }
            Op::MeanAxis(x, axis) => {
                let in_shape = self.shape(*x).to_vec();
                let (outer, dim, inner) = split_axis(&in_shape, *axis);
                let inv = F::one() / F::from_usize(dim).expect("dim");
                let mut gx = vec![F::zero(); outer * dim * inner];
                for o in 0..outer {
                    for d in 0..dim {
                        for j in 0..inner {
                            gx[(o * dim + d) * inner + j] = g[o * inner + j] * inv;
                        }
                    }
                }
                self.accum_owned(*x, gx);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.accum_owned(*x, vec![g[0]; n]);
            }
            Op::MeanAll(x) => {
                let n = self.value(*x).numel();
                let v = g[0] / F::from_usize(n.max(1)).expect("n");
                self.accum_owned(*x, vec![v; n]);
            }
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let n = *y.shape().last().expect("rank");
                let mut gx = Vec::with_capacity(y.numel());
                for (yr, gr) in y.data().chunks(n).zip(g.chunks(n)) {
                    let dot: F = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                    gx.extend(yr.iter().zip(gr).map(|(&a, &b)| a * (b - dot)));
                }
                self.accum_owned(*x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.shape(*gamma)[0];
                let gm = self.value(*gamma).data().to_vec();
                let fd = F::from_usize(d).expect("d");
                let mut dg = vec![F::zero(); d];
                let mut db = vec![F::zero(); d];
                let mut gx = Vec::with_capacity(g.len());
                for ((gr, hr), &r) in g.chunks(d).zip(xhat.chunks(d)).zip(rstd) {
                    let mut s1 = F::zero();
                    let mut s2 = F::zero();
                    for j in 0..d {
                        let dh = gr[j] * gm[j];
                        s1 = s1 + dh;
                        s2 = s2 + dh * hr[j];
                        dg[j] = dg[j] + gr[j] * hr[j];
                        db[j] = db[j] + gr[j];
                    }
                    let (m1, m2) = (s1 / fd, s2 / fd);
                    for j in 0..d {
                        gx.push(r * (gr[j] * gm[j] - m1 - hr[j] * m2));
                    }
                }
                self.accum_owned(*x, gx);
                self.accum_owned(*gamma, dg);
                self.accum_owned(*beta, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
                train,
            } => {
                let s = self.shape(*x).to_vec();
                let (n, c, plane) = (s[0], s[1], s[2] * s[3]);
                let gm = self.value(*gamma).data().to_vec();
                let fc = F::from_usize(n * plane).expect("count");
                let mut dg = vec![F::zero(); c];
                let mut db = vec![F::zero(); c];
                for b in 0..n {
                    for ch in 0..c {
                        for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                            dg[ch] = dg[ch] + g[k] * xhat[k];
                            db[ch] = db[ch] + g[k];
                        }
                    }
                }
                if self.ng(*x) {
                    let mut gx = vec![F::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let scale = gm[ch] * rstd[ch];
                            for k in (b * c + ch) * plane..(b * c + ch + 1) * plane {
                                gx[k] = if *train {
                                    // dx = γ·rstd·(g − mean(g) − x̂·mean(g·x̂))
                                    scale * (g[k] - db[ch] / fc - xhat[k] * dg[ch] / fc)
                                } else {
                                    scale * g[k]
                                };
                            }
                        }
                    }
                    self.accum_owned(*x, gx);
                }
                self.accum_owned(*gamma, dg);
                self.accum_owned(*beta, db);
            }
            Op::Conv2d { x, w, b, geom } => {
                let batch = self.shape(*x)[0];
                let (gx, gw, gb) = conv::conv2d_backward(
                    geom,
                    batch,
                    self.value(*x).data(),
                    self.value(*w).data(),
                    g,
                    self.ng(*x),
                );
                if self.ng(*x) {
                    self.accum_owned(*x, gx);
                }
                self.accum_owned(*w, gw);
                if let Some(b) = b {
                    self.accum_owned(*b, gb);
                }
            }
            Op::Dropout(x, mask) => {
                let gx = g.iter().zip(mask).map(|(&a, &m)| a * m).collect();
                self.accum_owned(*x, gx);
            }
            Op::Gather(x, idx) => {
                let cols = self.shape(*x)[1];
                let mut gx = vec![F::zero(); self.value(*x).numel()];
                for (r, &c) in idx.iter().enumerate() {
                    gx[r * cols + c] = gx[r * cols + c] + g[r];
                }
                self.accum_owned(*x, gx);
            }
        }
        self.nodes[i].op = op;
    }

    fn backward_matmul(&mut self, a: Var, b: Var, tb: bool, g: &[F]) {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let n = if tb {
            sb[sb.len() - 2]
        } else {
            sb[sb.len() - 1]
        };
        let shared = sb.len() == 2;
        let batch: usize = sa[..sa.len() - 2].iter().product();
        let ad = self.value(a).data();
        let bd = self.value(b).data();
        let ga = self.ng(a).then(|| {
            // dA = dC · Bᵀ
            let mut ga = vec![F::zero(); batch * m * k];
            if shared {
                F::gemm(batch * m, n, k, g, false, bd, !tb, F::zero(), &mut ga);
            } else {
                for i in 0..batch {
                    F::gemm(
                        m,
                        n,
                        k,
                        &g[i * m * n..(i + 1) * m * n],
                        false,
                        &bd[i * k * n..(i + 1) * k * n],
                        !tb,
                        F::zero(),
                        &mut ga[i * m * k..(i + 1) * m * k],
                    );
                }
            }
            ga
        });
        let gb = self.ng(b).then(|| {
            // dB = Aᵀ · dC, or (dC)ᵀ · A when B is stored transposed
            let mut gb = vec![F::zero(); sb.iter().product()];
            let rows = if shared { batch * m } else { m };
            let reps = if shared { 1 } else { batch };
            for i in 0..reps {
                let aa = &ad[i * rows * k..(i + 1) * rows * k];
                let gg = &g[i * rows * n..(i + 1) * rows * n];
                let dst = &mut gb[i * k * n..(i + 1) * k * n];
                if tb {
                    F::gemm(n, rows, k, gg, true, aa, false, F::zero(), dst);
                } else {
                    F::gemm(k, rows, n, aa, true, gg, false, F::zero(), dst);
                }
            }
            gb
        });
        if let Some(ga) = ga {
            self.accum_owned(a, ga);
        }
        if let Some(gb) = gb {
            self.accum_owned(b, gb);
        }
    }
}
