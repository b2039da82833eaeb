//! Tape-based reverse-mode differentiation over a fixed primitive set.
//!
//! A [`Graph`] records every primitive application in order. Each node keeps
//! its forward value plus whatever the backward rule needs; [`Graph::backward`]
//! replays the tape in reverse and accumulates gradients into every leaf that
//! requires them. Node values are never mutated after they are recorded.

pub mod checkpoint;
pub mod gradcheck;
pub mod kernels;

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::ssm::scan::{self, InputDiscretization, ScanInputs};
use crate::tensor::{strides, Real, Tensor};
use kernels::ConvGeom;

pub use gradcheck::{grad_check, grad_check_coords, primitive_suite, GradCheck, PrimitiveCheck};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum UnaryKind {
    Exp,
    Log,
    Softplus,
    Sigmoid,
    Silu,
    Relu,
    Relu6,
    Clamp(f64, f64),
}

#[derive(Debug)]
enum Op<T: Real> {
    Leaf,
    Binary { kind: BinKind, a: Var, b: Var },
    Affine { a: Var, scale: T },
    Unary { kind: UnaryKind, a: Var },
    MatMul { a: Var, b: Var },
    Conv { x: Var, w: Var, geo: ConvGeom },
    Depthwise { x: Var, w: Var, geo: ConvGeom },
    LayerNorm { a: Var, rstd: Vec<T> },
    BatchNorm { a: Var, rstd: Vec<T> },
    GlobalAvgPool { a: Var },
    AvgPool { a: Var, k: usize },
    Resize { a: Var },
    Concat { parts: Vec<Var> },
    Reshape { a: Var },
    Permute { a: Var, perm: Vec<usize> },
    Sum { a: Var },
    Mean { a: Var },
    SumLast { a: Var },
    GatherRows { a: Var, idx: Arc<Vec<usize>> },
    Scan { ins: [Var; 6], segments: Arc<Vec<usize>>, mode: InputDiscretization, tape: scan::ScanTape<T> },
}

#[derive(Debug)]
struct Node<T: Real> {
    shape: Vec<usize>,
    value: Vec<T>,
    needs_grad: bool,
    op: Op<T>,
}

/// Batch statistics produced by a training-mode batch normalization.
#[derive(Debug, Clone)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the quantity tracked by running estimates.
    pub var: Vec<T>,
}

/// The recording tape.
#[derive(Debug)]
pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    let n = a.len().max(b.len());
    let mut out = vec![0; n];
    for i in 0..n {
        let da = if i + a.len() >= n { a[i + a.len() - n] } else { 1 };
        let db = if i + b.len() >= n { b[i + b.len() - n] } else { 1 };
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => return None,
        };
    }
    Some(out)
}

/// Strides of `shape` right-aligned against `out`, zero along broadcast axes.
fn broadcast_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let own = strides(shape);
    let off = out.len() - shape.len();
    (0..out.len())
        .map(|i| if i < off || shape[i - off] == 1 { 0 } else { own[i - off] })
        .collect()
}

/// Width `w` when `b` repeats along the leading axes of `a` (e.g. a bias `[C]` against `[.., C]`).
fn row_broadcast(sa: &[usize], sb: &[usize], out: &[usize]) -> Option<usize> {
    if sa != out {
        return None;
    }
    let trimmed: &[usize] = {
        let lead = sb.iter().take_while(|&&d| d == 1).count();
        &sb[lead..]
    };
    if trimmed.is_empty() || trimmed.len() > out.len() || out[out.len() - trimmed.len()..] != *trimmed {
        return None;
    }
    Some(trimmed.iter().product())
}

/// Visits `(out, a, b)` flat offsets of a broadcast binary operation in output order.
fn for_each_broadcast(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let nd = out.len();
    let inner = out[nd - 1];
    let (ia_step, ib_step) = (sa[nd - 1], sb[nd - 1]);
    let outer: usize = out[..nd - 1].iter().product();
    let mut idx = vec![0usize; nd - 1];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..outer {
        let base = o * inner;
        for j in 0..inner {
            f(base + j, oa + j * ia_step, ob + j * ib_step);
        }
        for ax in (0..nd - 1).rev() {
            idx[ax] += 1;
            oa += sa[ax];
            ob += sb[ax];
            if idx[ax] < out[ax] {
                break;
            }
            oa -= sa[ax] * out[ax];
            ob -= sb[ax] * out[ax];
            idx[ax] = 0;
        }
    }
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn grad_slot<T: Real>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), grads: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records `tensor` as a leaf; gradients are tracked when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        let needs_grad = tensor.requires_grad;
        let shape = tensor.shape().to_vec();
        self.nodes.push(Node { shape, value: tensor.into_data(), needs_grad, op: Op::Leaf });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        let mut t = tensor;
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Leaf built from a raw buffer, with gradient tracking.
    pub fn param(&mut self, shape: &[usize], data: Vec<T>) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape.to_vec(), data)?.with_grad()))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        let mut t = Tensor::new(n.shape.clone(), n.value.clone()).expect("node shape invariant");
        t.requires_grad = n.needs_grad;
        t.grad = self.grad(v).map(<[T]>::to_vec);
        t
    }

    /// Gradient accumulated by the last [`Graph::backward`]; only leaves and the loss retain one.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    fn push(&mut self, name: &'static str, shape: Vec<usize>, value: Vec<T>, inputs: &[Var], op: Op<T>) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if let Some(i) = value.iter().position(|v| !v.is_finite()) {
            let bad_input = inputs.iter().any(|&v| self.nodes[v.0].value.iter().any(|x| !x.is_finite()));
            let detail = if bad_input {
                "non-finite input".to_string()
            } else {
                format!("output element {i} is {}", value[i])
            };
            return Err(Error::numeric(name, detail));
        }
        let needs_grad = inputs.iter().any(|&v| self.nodes[v.0].needs_grad);
        let op = if needs_grad { op } else { Op::Leaf };
        self.nodes.push(Node { shape, value, needs_grad, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn binary(&mut self, kind: BinKind, a: Var, b: Var) -> Result<Var> {
        let name = match kind {
            BinKind::Add => "add",
            BinKind::Sub => "sub",
            BinKind::Mul => "mul",
            BinKind::Div => "div",
        };
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out_shape = broadcast_shape(&sa, &sb)
            .ok_or_else(|| Error::shape(name, format!("cannot broadcast {sa:?} with {sb:?}")))?;
        let f = |x: T, y: T| match kind {
            BinKind::Add => x + y,
            BinKind::Sub => x - y,
            BinKind::Mul => x * y,
            BinKind::Div => x / y,
        };
        let (va, vb) = (self.value(a), self.value(b));
        let out = if sa == sb {
            va.iter().zip(vb).map(|(&x, &y)| f(x, y)).collect()
        } else if let Some(w) = row_broadcast(&sa, &sb, &out_shape) {
            let mut out = Vec::with_capacity(va.len());
            for row in va.chunks_exact(w) {
                out.extend(row.iter().zip(vb).map(|(&x, &y)| f(x, y)));
            }
            out
        } else {
            let n = out_shape.iter().product();
            let mut out = vec![T::zero(); n];
            let (ta, tb) = (broadcast_strides(&sa, &out_shape), broadcast_strides(&sb, &out_shape));
            for_each_broadcast(&out_shape, &ta, &tb, |o, i, j| out[o] = f(va[i], vb[j]));
            out
        };
        self.push(name, out_shape, out, &[a, b], Op::Binary { kind, a, b })
    }

    /// Elementwise sum with numpy-style broadcasting.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinKind::Div, a, b)
    }

    /// `scale · a + shift`
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Result<Var> {
        let out = self.value(a).iter().map(|&v| scale * v + shift).collect();
        let shape = self.shape(a).to_vec();
        self.push("affine", shape, out, &[a], Op::Affine { a, scale })
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var> {
        self.affine(a, s, T::zero())
    }

    fn unary(&mut self, kind: UnaryKind, a: Var) -> Result<Var> {
        let name = match kind {
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Silu => "silu",
            UnaryKind::Relu => "relu",
            UnaryKind::Relu6 => "relu6",
            UnaryKind::Clamp(..) => "clamp",
        };
        let six = T::c(6.0);
        let out: Vec<T> = self
            .value(a)
            .iter()
            .map(|&x| match kind {
                UnaryKind::Exp => x.exp(),
                UnaryKind::Log => x.ln(),
                UnaryKind::Softplus => x.max(T::zero()) + (-x.abs()).exp().ln_1p(),
                UnaryKind::Sigmoid => sigmoid(x),
                UnaryKind::Silu => x * sigmoid(x),
                UnaryKind::Relu => x.max(T::zero()),
                UnaryKind::Relu6 => x.max(T::zero()).min(six),
                UnaryKind::Clamp(lo, hi) => x.max(T::c(lo)).min(T::c(hi)),
            })
            .collect();
        if kind == UnaryKind::Log {
            if let Some(x) = self.value(a).iter().find(|&&x| x <= T::zero()) {
                return Err(Error::numeric("log", format!("argument {x} is not positive")));
            }
        }
        let shape = self.shape(a).to_vec();
        self.push(name, shape, out, &[a], Op::Unary { kind, a })
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, a)
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, a)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, a)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, a)
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Silu, a)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu, a)
    }

    pub fn relu6(&mut self, a: Var) -> Result<Var> {
        self.unary(UnaryKind::Relu6, a)
    }

    /// Clamp into `[lo, hi]`; the gradient passes through inside the interval.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary(UnaryKind::Clamp(lo, hi), a)
    }

    /// `[m, k] · [k, n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::shape("matmul", format!("{sa:?} · {sb:?}")));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let out = kernels::matmul(self.value(a), self.value(b), m, k, n);
        self.push("matmul", vec![m, n], out, &[a, b], Op::MatMul { a, b })
    }

    fn conv_geom(&self, name: &'static str, x: Var, kh: usize, kw: usize, out_c: usize, stride: usize, pad: usize) -> Result<ConvGeom> {
        let sx = self.shape(x);
        if sx.len() != 4 {
            return Err(Error::shape(name, format!("input must be [batch, h, w, c], got {sx:?}")));
        }
        let (out_h, out_w) = match (ConvGeom::out_dim(sx[1], kh, stride, pad), ConvGeom::out_dim(sx[2], kw, stride, pad)) {
            (Some(h), Some(w)) => (h, w),
            _ => {
                return Err(Error::shape(
                    name,
                    format!("kernel {kh}x{kw} stride {stride} pad {pad} does not fit input {sx:?}"),
                ))
            }
        };
        Ok(ConvGeom { batch: sx[0], in_h: sx[1], in_w: sx[2], in_c: sx[3], out_h, out_w, out_c, kh, kw, stride, pad })
    }

    /// Dense 2D convolution; `w` is `[kh, kw, in_c, out_c]`.
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 4 {
            return Err(Error::shape("conv2d", format!("weight must be [kh, kw, in_c, out_c], got {sw:?}")));
        }
        let geo = self.conv_geom("conv2d", x, sw[0], sw[1], sw[3], stride, pad)?;
        if geo.in_c != sw[2] {
            return Err(Error::shape("conv2d", format!("input has {} channels, weight expects {}", geo.in_c, sw[2])));
        }
        let out = kernels::conv2d(self.value(x), self.value(w), &geo);
        self.push("conv2d", vec![geo.batch, geo.out_h, geo.out_w, geo.out_c], out, &[x, w], Op::Conv { x, w, geo })
    }

    /// Depthwise 2D convolution; `w` is `[kh, kw, c]`.
    pub fn depthwise_conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let sw = self.shape(w).to_vec();
        if sw.len() != 3 {
            return Err(Error::shape("depthwise_conv2d", format!("weight must be [kh, kw, c], got {sw:?}")));
        }
        let geo = self.conv_geom("depthwise_conv2d", x, sw[0], sw[1], sw[2], stride, pad)?;
        if geo.in_c != sw[2] {
            return Err(Error::shape(
                "depthwise_conv2d",
                format!("input has {} channels, weight has {}", geo.in_c, sw[2]),
            ));
        }
        let out = kernels::depthwise(self.value(x), self.value(w), &geo);
        self.push(
            "depthwise_conv2d",
            vec![geo.batch, geo.out_h, geo.out_w, geo.out_c],
            out,
            &[x, w],
            Op::Depthwise { x, w, geo },
        )
    }

    /// Normalizes over the last axis (no affine).
    pub fn layer_norm(&mut self, a: Var, eps: T) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let width = *shape.last().expect("non-empty shape");
        let (out, rstd) = kernels::normalize_rows(self.value(a), width, eps);
        self.push("layer_norm", shape, out, &[a], Op::LayerNorm { a, rstd })
    }

    /// Normalizes each channel (last axis) with statistics over every other axis (no affine).
    pub fn batch_norm(&mut self, a: Var, eps: T) -> Result<(Var, BatchStats<T>)> {
        let shape = self.shape(a).to_vec();
        let channels = *shape.last().expect("non-empty shape");
        let rows = self.value(a).len() / channels;
        let (out, rstd, mean, var) = kernels::normalize_channels(self.value(a), channels, eps);
        let correction = if rows > 1 { T::c(rows as f64 / (rows - 1) as f64) } else { T::one() };
        let stats = BatchStats { mean, var: var.into_iter().map(|v| v * correction).collect() };
        let v = self.push("batch_norm", shape, out, &[a], Op::BatchNorm { a, rstd })?;
        Ok((v, stats))
    }

    fn image_dims(&self, name: &'static str, a: Var) -> Result<[usize; 4]> {
        let s = self.shape(a);
        if s.len() != 4 {
            return Err(Error::shape(name, format!("expected [batch, h, w, c], got {s:?}")));
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// `[b, h, w, c] → [b, 1, 1, c]`
    pub fn global_avg_pool(&mut self, a: Var) -> Result<Var> {
        let [b, h, w, c] = self.image_dims("global_avg_pool", a)?;
        let inv = T::one() / T::c((h * w) as f64);
        let mut out = vec![T::zero(); b * c];
        for (i, row) in self.value(a).chunks_exact(c).enumerate() {
            let o = &mut out[(i / (h * w)) * c..(i / (h * w) + 1) * c];
            for (ov, &v) in o.iter_mut().zip(row) {
                *ov += v;
            }
        }
        out.iter_mut().for_each(|v| *v *= inv);
        self.push("global_avg_pool", vec![b, 1, 1, c], out, &[a], Op::GlobalAvgPool { a })
    }

    /// Non-overlapping `k×k` average pooling; spatial dims must be multiples of `k`.
    pub fn avg_pool(&mut self, a: Var, k: usize) -> Result<Var> {
        let [b, h, w, c] = self.image_dims("avg_pool", a)?;
        if k == 0 || h % k != 0 || w % k != 0 {
            return Err(Error::shape("avg_pool", format!("{h}x{w} is not divisible into {k}x{k} windows")));
        }
        let out = kernels::avg_pool(self.value(a), b, h, w, c, k);
        self.push("avg_pool", vec![b, h / k, w / k, c], out, &[a], Op::AvgPool { a, k })
    }

    /// Bilinear resize to `out_h × out_w`, half-pixel centres.
    pub fn resize_bilinear(&mut self, a: Var, out_h: usize, out_w: usize) -> Result<Var> {
        let [b, h, w, c] = self.image_dims("resize_bilinear", a)?;
        if out_h == 0 || out_w == 0 {
            return Err(Error::shape("resize_bilinear", "target size must be positive"));
        }
        let out = kernels::resize_bilinear(self.value(a), b, h, w, c, out_h, out_w);
        self.push("resize_bilinear", vec![b, out_h, out_w, c], out, &[a], Op::Resize { a })
    }

    /// Bilinear ×2 upsampling.
    pub fn upsample2(&mut self, a: Var) -> Result<Var> {
        let [_, h, w, _] = self.image_dims("upsample2", a)?;
        self.resize_bilinear(a, 2 * h, 2 * w)
    }

    /// Concatenates along the last axis; all leading dims must agree.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::shape("concat", "nothing to concatenate"))?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s[..s.len() - 1] != lead[..] {
                return Err(Error::shape("concat", format!("leading dims {:?} vs {lead:?}", &s[..s.len() - 1])));
            }
            widths.push(s[s.len() - 1]);
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        self.push("concat", shape, out, parts, Op::Concat { parts: parts.to_vec() })
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.is_empty() || shape.contains(&0) {
            return Err(Error::shape("reshape", format!("cannot view {:?} as {shape:?}", self.shape(a))));
        }
        let out = self.value(a).to_vec();
        self.push("reshape", shape.to_vec(), out, &[a], Op::Reshape { a })
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&mut self, a: Var, perm: &[usize]) -> Result<Var> {
        let s = self.shape(a).to_vec();
        let mut seen = vec![false; s.len()];
        if perm.len() != s.len() || perm.iter().any(|&p| p >= s.len() || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", format!("{perm:?} is not a permutation of {} axes", s.len())));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| s[p]).collect();
        let src = strides(&s);
        let gather_strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
        let zeros = vec![0; out_shape.len()];
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for_each_broadcast(&out_shape, &gather_strides, &zeros, |o, i, _| out[o] = x[i]);
        self.push("permute", out_shape, out, &[a], Op::Permute { a, perm: perm.to_vec() })
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push("sum", vec![1], vec![s], &[a], Op::Sum { a })
    }

    /// Mean of all elements, shape `[1]`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = T::c(self.value(a).len() as f64);
        let s = self.value(a).iter().copied().sum::<T>() / n;
        self.push("mean", vec![1], vec![s], &[a], Op::Mean { a })
    }

    /// Sums over the last axis, keeping it with size 1.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let mut shape = self.shape(a).to_vec();
        let w = *shape.last().expect("non-empty shape");
        let out = self.value(a).chunks_exact(w).map(|r| r.iter().copied().sum()).collect();
        *shape.last_mut().expect("non-empty shape") = 1;
        self.push("sum_last", shape, out, &[a], Op::SumLast { a })
    }

    /// Selects rows of `a` viewed as `[rows, last_dim]`: output row `m` is input row `idx[m]`.
    pub fn gather_rows(&mut self, a: Var, idx: Arc<Vec<usize>>) -> Result<Var> {
        let s = self.shape(a);
        let w = *s.last().expect("non-empty shape");
        let rows = self.value(a).len() / w;
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("row {bad} out of range for {rows} rows")));
        }
        if idx.is_empty() {
            return Err(Error::shape("gather_rows", "empty index"));
        }
        let x = self.value(a);
        let mut out = Vec::with_capacity(idx.len() * w);
        for &i in idx.iter() {
            out.extend_from_slice(&x[i * w..(i + 1) * w]);
        }
        self.push("gather_rows", vec![idx.len(), w], out, &[a], Op::GatherRows { a, idx })
    }

    /// Selective scan over concatenated `segments`.
    ///
    /// Operand shapes: `u, delta: [L, D]`, `a: [D, N]` (negative), `b, c: [L, N]`, `d: [D]`.
    #[allow(clippy::too_many_arguments)]
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        segments: Arc<Vec<usize>>,
        mode: InputDiscretization,
    ) -> Result<Var> {
        let su = self.shape(u).to_vec();
        if su.len() != 2 || self.shape(a).len() != 2 {
            return Err(Error::shape("selective_scan", format!("u must be [L, D], A [D, N]; got {su:?}, {:?}", self.shape(a))));
        }
        let need = [u, delta, a, b, c, d].iter().any(|&v| self.needs_grad(v));
        let inp = ScanInputs {
            u: self.value(u),
            delta: self.value(delta),
            a: self.value(a),
            b: self.value(b),
            c: self.value(c),
            d: self.value(d),
            len: su[0],
            channels: su[1],
            state: self.shape(a)[1],
        };
        let (y, tape) = if need {
            scan::selective_scan_with_states(&inp, &segments, mode)?
        } else {
            (scan::selective_scan_segments(&inp, &segments, mode)?, scan::ScanTape::default())
        };
        self.push(
            "selective_scan",
            su,
            y,
            &[u, delta, a, b, c, d],
            Op::Scan { ins: [u, delta, a, b, c, d], segments, mode, tape },
        )
    }

    /// Reverse pass from a single-element `loss`, seeding `∂loss/∂loss = 1`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(Error::shape("backward", format!("loss must have one element, got {:?}", self.shape(loss))));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
            if i == loss.0 {
                grads[i] = Some(g);
            }
        }
        self.grads = grads;
        Ok(())
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let node = &nodes[i];
        let ng = |v: Var| nodes[v.0].needs_grad;
        let len = |v: Var| nodes[v.0].value.len();
        match &node.op {
            Op::Leaf => {}
            Op::Binary { kind, a, b } => {
                let (a, b) = (*a, *b);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (ta, tb) = (broadcast_strides(sa, &node.shape), broadcast_strides(sb, &node.shape));
                let kind = *kind;
                let da = |_x: T, y: T, gv: T| match kind {
                    BinKind::Add | BinKind::Sub => gv,
                    BinKind::Mul => gv * y,
                    BinKind::Div => gv / y,
                };
                let db = |x: T, y: T, gv: T| match kind {
                    BinKind::Add => gv,
                    BinKind::Sub => -gv,
                    BinKind::Mul => gv * x,
                    BinKind::Div => -gv * x / (y * y),
                };
                let rows = row_broadcast(sa, sb, &node.shape);
                if ng(a) {
                    let slot = grad_slot(grads, a, len(a));
                    if sa == sb {
                        for j in 0..g.len() {
                            slot[j] += da(va[j], vb[j], g[j]);
                        }
                    } else if let Some(w) = rows {
                        for (o, (s, &gv)) in slot.iter_mut().zip(g).enumerate() {
                            *s += da(va[o], vb[o % w], gv);
                        }
                    } else {
                        for_each_broadcast(&node.shape, &ta, &tb, |o, ia, ib| slot[ia] += da(va[ia], vb[ib], g[o]));
                    }
                }
                if ng(b) {
                    let slot = grad_slot(grads, b, len(b));
                    if sa == sb {
                        for j in 0..g.len() {
                            slot[j] += db(va[j], vb[j], g[j]);
                        }
                    } else if let Some(w) = rows {
                        for (row, grow) in va.chunks_exact(w).zip(g.chunks_exact(w)) {
                            for j in 0..w {
                                slot[j] += db(row[j], vb[j], grow[j]);
                            }
                        }
                    } else {
                        for_each_broadcast(&node.shape, &ta, &tb, |o, ia, ib| slot[ib] += db(va[ia], vb[ib], g[o]));
                    }
                }
            }
            Op::Affine { a, scale } => {
                let slot = grad_slot(grads, *a, len(*a));
                for (s, &gv) in slot.iter_mut().zip(g) {
                    *s += *scale * gv;
                }
            }
            Op::Unary { kind, a } => {
                let x = &nodes[a.0].value;
                let y = &node.value;
                let slot = grad_slot(grads, *a, len(*a));
                let six = T::c(6.0);
                for j in 0..g.len() {
                    let d = match *kind {
                        UnaryKind::Exp => y[j],
                        UnaryKind::Log => T::one() / x[j],
                        UnaryKind::Softplus => sigmoid(x[j]),
                        UnaryKind::Sigmoid => y[j] * (T::one() - y[j]),
                        UnaryKind::Silu => {
                            let s = sigmoid(x[j]);
                            s * (T::one() + x[j] * (T::one() - s))
                        }
                        UnaryKind::Relu => {
                            if x[j] > T::zero() {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Relu6 => {
                            if x[j] > T::zero() && x[j] < six {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                        UnaryKind::Clamp(lo, hi) => {
                            if x[j] >= T::c(lo) && x[j] <= T::c(hi) {
                                T::one()
                            } else {
                                T::zero()
                            }
                        }
                    };
                    slot[j] += g[j] * d;
                }
            }
            Op::MatMul { a, b } => {
                let (sa, sb) = (&nodes[a.0].shape, &nodes[b.0].shape);
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (&nodes[a.0].value, &nodes[b.0].value);
                let mut ga = ng(*a).then(|| grads[a.0].take().unwrap_or_else(|| vec![T::zero(); m * k]));
                let mut gb = ng(*b).then(|| grads[b.0].take().unwrap_or_else(|| vec![T::zero(); k * n]));
                kernels::matmul_backward(va, vb, g, m, k, n, ga.as_deref_mut(), gb.as_deref_mut());
                match (ga, gb) {
                    (Some(mut ga), Some(gb)) if a == b => {
                        ga.iter_mut().zip(gb).for_each(|(x, y)| *x += y);
                        grads[a.0] = Some(ga);
                    }
                    (ga, gb) => {
                        if let Some(ga) = ga {
                            grads[a.0] = Some(ga);
                        }
                        if let Some(gb) = gb {
                            grads[b.0] = Some(gb);
                        }
                    }
                }
            }
            Op::Conv { x, w, geo } | Op::Depthwise { x, w, geo } => {
                let (vx, vw) = (&nodes[x.0].value, &nodes[w.0].value);
                let mut gx = ng(*x).then(|| grads[x.0].take().unwrap_or_else(|| vec![T::zero(); vx.len()]));
                let mut gw = ng(*w).then(|| grads[w.0].take().unwrap_or_else(|| vec![T::zero(); vw.len()]));
                if matches!(node.op, Op::Conv { .. }) {
                    kernels::conv2d_backward(vx, vw, g, geo, gx.as_deref_mut(), gw.as_deref_mut());
                } else {
                    kernels::depthwise_backward(vx, vw, g, geo, gx.as_deref_mut(), gw.as_deref_mut());
                }
                if let Some(gx) = gx {
                    grads[x.0] = Some(gx);
                }
                if let Some(gw) = gw {
                    grads[w.0] = Some(gw);
                }
            }
            Op::LayerNorm { a, rstd } => {
                let width = *node.shape.last().expect("non-empty");
                let slot = grad_slot(grads, *a, len(*a));
                kernels::normalize_rows_backward(&node.value, rstd, g, width, slot);
            }
            Op::BatchNorm { a, rstd } => {
                let channels = *node.shape.last().expect("non-empty");
                let slot = grad_slot(grads, *a, len(*a));
                kernels::normalize_channels_backward(&node.value, rstd, g, channels, slot);
            }
            Op::GlobalAvgPool { a } => {
                let s = &nodes[a.0].shape;
                let (hw, c) = (s[1] * s[2], s[3]);
                let inv = T::one() / T::c(hw as f64);
                let slot = grad_slot(grads, *a, len(*a));
                for (r, row) in slot.chunks_exact_mut(c).enumerate() {
                    let gr = &g[(r / hw) * c..(r / hw + 1) * c];
                    for (sv, &gv) in row.iter_mut().zip(gr) {
                        *sv += gv * inv;
                    }
                }
            }
            Op::AvgPool { a, k } => {
                let s = &nodes[a.0].shape;
                let (b, h, w, c, k) = (s[0], s[1], s[2], s[3], *k);
                let (oh, ow) = (h / k, w / k);
                let inv = T::one() / T::c((k * k) as f64);
                let slot = grad_slot(grads, *a, len(*a));
                for bi in 0..b {
                    for y in 0..h {
                        for x in 0..w {
                            let o = ((bi * oh + y / k) * ow + x / k) * c;
                            let p = ((bi * h + y) * w + x) * c;
                            for ch in 0..c {
                                slot[p + ch] += g[o + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::Resize { a } => {
                let s = &nodes[a.0].shape;
                let slot = grad_slot(grads, *a, len(*a));
                kernels::resize_bilinear_backward(g, s[0], s[1], s[2], s[3], node.shape[1], node.shape[2], slot);
            }
            Op::Concat { parts } => {
                let total = *node.shape.last().expect("non-empty");
                let rows = node.value.len() / total;
                let mut off = 0;
                for &p in parts {
                    let w = *nodes[p.0].shape.last().expect("non-empty");
                    if ng(p) {
                        let slot = grad_slot(grads, p, len(p));
                        for r in 0..rows {
                            for j in 0..w {
                                slot[r * w + j] += g[r * total + off + j];
                            }
                        }
                    }
                    off += w;
                }
            }
            Op::Reshape { a } => {
                let slot = grad_slot(grads, *a, len(*a));
                for (s, &gv) in slot.iter_mut().zip(g) {
                    *s += gv;
                }
            }
            Op::Permute { a, perm } => {
                let src = strides(&nodes[a.0].shape);
                let gather_strides: Vec<usize> = perm.iter().map(|&p| src[p]).collect();
                let zeros = vec![0; perm.len()];
                let slot = grad_slot(grads, *a, len(*a));
                for_each_broadcast(&node.shape, &gather_strides, &zeros, |o, i, _| slot[i] += g[o]);
            }
            Op::Sum { a } => {
                let slot = grad_slot(grads, *a, len(*a));
                slot.iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean { a } => {
                let n = len(*a);
                let gv = g[0] / T::c(n as f64);
                let slot = grad_slot(grads, *a, n);
                slot.iter_mut().for_each(|s| *s += gv);
            }
            Op::SumLast { a } => {
                let w = *nodes[a.0].shape.last().expect("non-empty");
                let slot = grad_slot(grads, *a, len(*a));
                for (r, row) in slot.chunks_exact_mut(w).enumerate() {
                    row.iter_mut().for_each(|s| *s += g[r]);
                }
            }
            Op::GatherRows { a, idx } => {
                let w = *node.shape.last().expect("non-empty");
                let slot = grad_slot(grads, *a, len(*a));
                for (m, &r) in idx.iter().enumerate() {
                    for j in 0..w {
                        slot[r * w + j] += g[m * w + j];
                    }
                }
            }
            Op::Scan { ins, segments, mode, tape } => {
                let [u, delta, a, b, c, d] = *ins;
                let su = &nodes[u.0].shape;
                let inp = ScanInputs {
                    u: &nodes[u.0].value,
                    delta: &nodes[delta.0].value,
                    a: &nodes[a.0].value,
                    b: &nodes[b.0].value,
                    c: &nodes[c.0].value,
                    d: &nodes[d.0].value,
                    len: su[0],
                    channels: su[1],
                    state: nodes[a.0].shape[1],
                };
                let sg = scan::selective_scan_backward(&inp, segments, *mode, tape, g);
                for (v, gv) in [(u, sg.u), (delta, sg.delta), (a, sg.a), (b, sg.b), (c, sg.c), (d, sg.d)] {
                    if ng(v) {
                        let slot = grad_slot(grads, v, gv.len());
                        for (s, x) in slot.iter_mut().zip(gv) {
                            *s += x;
                        }
                    }
                }
            }
        }
    }
}
