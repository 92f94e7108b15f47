//! Reverse-mode automatic differentiation on an append-only tape.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are evaluated
//! eagerly as they are appended; [`Graph::backward`] walks the tape in
//! reverse and accumulates gradients for every node that (transitively)
//! depends on a leaf created with `requires_grad`.

use super::{gemm, Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Backward rule for an operation defined outside this module.
pub trait CustomOp<T: Real>: Send + Sync {
    fn name(&self) -> &'static str;

    /// Gradient with respect to each input; `needs[i]` is false when input
    /// `i` does not require a gradient and `None` may be returned for it.
    fn backward(
        &self,
        inputs: &[&Tensor<T>],
        output: &Tensor<T>,
        grad_out: &[T],
        needs: &[bool],
    ) -> Vec<Option<Vec<T>>>;
}

/// Custom op whose input gradient was computed alongside its value, for
/// fused losses where the forward pass already has every intermediate.
pub struct Precomputed<T> {
    pub name: &'static str,
    pub grad: Vec<T>,
}

impl<T: Real> CustomOp<T> for Precomputed<T> {
    fn name(&self) -> &'static str {
        self.name
    }

    fn backward(&self, _: &[&Tensor<T>], _: &Tensor<T>, grad_out: &[T], _: &[bool]) -> Vec<Option<Vec<T>>> {
        let s = grad_out[0];
        vec![Some(self.grad.iter().map(|&g| g * s).collect())]
    }
}

enum Op<T: Real> {
    Leaf,
    Linear { x: Var, w: Var, b: Option<Var> },
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    DepthToSpace { x: Var, r: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Affine { x: Var, scale: T },
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    BroadcastPlane(Var),
    Reshape(Var),
    Sum(Var),
    Mean(Var),
    BceLogits { logits: Var, target: Tensor<T>, scale: T },
    SqDiffMean(Var, Var),
    ClampAdd { x: Var, w: Var, scale: T },
    Custom { inputs: Vec<Var>, op: Box<dyn CustomOp<T>> },
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Graph<T: Real> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn softplus<T: Real>(z: T) -> T {
    z.max(T::zero()) + (-z.abs()).exp().ln_1p()
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

#[allow(clippy::too_many_arguments)]
fn im2col<T: Real>(
    x: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    col: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let src = &x[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let dst = &mut col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    let drow = &mut dst[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        drow.fill(T::zero());
                        continue;
                    }
                    let srow = &src[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in drow.iter_mut().enumerate() {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize {
                            T::zero()
                        } else {
                            srow[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

#[allow(clippy::too_many_arguments)]
fn col2im<T: Real>(
    col: &[T],
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut [T],
) {
    let plane = ho * wo;
    for ci in 0..c {
        let dst = &mut dx[ci * h * w..(ci + 1) * h * w];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ci * k + ky) * k + kx;
                let src = &col[row * plane..(row + 1) * plane];
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let drow = &mut dst[iy as usize * w..(iy as usize + 1) * w];
                    for ox in 0..wo {
                        let ix = (ox * stride + kx) as isize - pad as isize;
                        if ix >= 0 && ix < w as isize {
                            drow[ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

struct ConvGeom {
    n: usize,
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn direct(&self, stride: usize, pad: usize) -> bool {
        self.k == 1 && stride == 1 && pad == 0
    }
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf node. Gradients are only tracked through leaves marked `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
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

    /// `x[N,I] · w[I,O] + b[O]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert_eq!(xs.len(), 2, "linear input must be 2-D, got {xs:?}");
        assert_eq!(xs[1], ws[0], "linear: input width {} vs weight {:?}", xs[1], ws);
        let (n, i, o) = (xs[0], xs[1], ws[1]);
        let mut out = vec![T::zero(); n * o];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(o) {
                row.copy_from_slice(bv);
            }
        }
        gemm(n, i, o, self.value(x).data(), false, self.value(w).data(), false, &mut out, T::one());
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(Tensor::new(&[n, o], out), Op::Linear { x, w, b }, &parents)
    }

    fn conv_geom(&self, x: Var, w: Var, stride: usize, pad: usize) -> ConvGeom {
        let xs = self.shape(x);
        let ws = self.shape(w);
        assert_eq!(xs.len(), 4, "conv2d input must be NCHW, got {xs:?}");
        assert_eq!(ws.len(), 4, "conv2d weight must be OCKK");
        assert_eq!(xs[1], ws[1], "conv2d channel mismatch: {xs:?} vs {ws:?}");
        assert_eq!(ws[2], ws[3], "square kernels only");
        let k = ws[2];
        let ho = (xs[2] + 2 * pad - k) / stride + 1;
        let wo = (xs[3] + 2 * pad - k) / stride + 1;
        ConvGeom {
            n: xs[0],
            c: xs[1],
            h: xs[2],
            w: xs[3],
            o: ws[0],
            k,
            ho,
            wo,
        }
    }

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let g = self.conv_geom(x, w, stride, pad);
        let ckk = g.c * g.k * g.k;
        let plane = g.ho * g.wo;
        let mut out = vec![T::zero(); g.n * g.o * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        let direct = g.direct(stride, pad);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
        for ni in 0..g.n {
            let xn = &xv[ni * g.c * g.h * g.w..(ni + 1) * g.c * g.h * g.w];
            let on = &mut out[ni * g.o * plane..(ni + 1) * g.o * plane];
            if let Some(bv) = bv {
                for (oc, row) in on.chunks_mut(plane).enumerate() {
                    row.fill(bv[oc]);
                }
            }
            let cols: &[T] = if direct {
                xn
            } else {
                im2col(xn, g.c, g.h, g.w, g.k, stride, pad, g.ho, g.wo, &mut col);
                &col
            };
            gemm(g.o, ckk, plane, wv, false, cols, false, on, T::one());
        }
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(
            Tensor::new(&[g.n, g.o, g.ho, g.wo], out),
            Op::Conv2d { x, w, b, stride, pad },
            &parents,
        )
    }

    /// `[N, C·r·r, H, W] → [N, C, H·r, W·r]`; channel `c·r² + dy·r + dx` fills
    /// sub-pixel `(dy, dx)` of each output block.
    pub fn depth_to_space(&mut self, x: Var, r: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 4);
        assert_eq!(s[1] % (r * r), 0, "channels {} not divisible by r²={}", s[1], r * r);
        let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
        let c = cin / (r * r);
        let (ho, wo) = (h * r, w * r);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * ho * wo];
        for ni in 0..n {
            for ci in 0..c {
                for dy in 0..r {
                    for dx in 0..r {
                        let src_c = ci * r * r + dy * r + dx;
                        let src = &xv[((ni * cin + src_c) * h) * w..((ni * cin + src_c) * h + h) * w];
                        for y in 0..h {
                            let orow = ((ni * c + ci) * ho + y * r + dy) * wo;
                            for xi in 0..w {
                                out[orow + xi * r + dx] = src[y * w + xi];
                            }
                        }
                    }
                }
            }
        }
        self.push(Tensor::new(&[n, c, ho, wo], out), Op::DepthToSpace { x, r }, &[x])
    }

    fn zip_same(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "elementwise shape mismatch");
        let data = av.data().iter().zip(bv.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(av.shape(), data)
    }

    fn map(&self, x: Var, f: impl Fn(T) -> T) -> Tensor<T> {
        let xv = self.value(x);
        Tensor::new(xv.shape(), xv.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |p, q| p + q);
        self.push(t, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |p, q| p - q);
        self.push(t, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let t = self.zip_same(a, b, |p, q| p * q);
        self.push(t, Op::Mul(a, b), &[a, b])
    }

    /// `scale·x + shift`.
    pub fn affine(&mut self, x: Var, scale: f64, shift: f64) -> Var {
        let (s, c) = (T::lit(scale), T::lit(shift));
        let t = self.map(x, |v| s * v + c);
        self.push(t, Op::Affine { x, scale: s }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.map(x, sigmoid);
        self.push(t, Op::Sigmoid(x), &[x])
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.tanh());
        self.push(t, Op::Tanh(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(T::zero()));
        self.push(t, Op::Relu(x), &[x])
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let s = T::lit(slope);
        let t = self.map(x, |v| if v > T::zero() { v } else { s * v });
        self.push(t, Op::LeakyRelu(x, s), &[x])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Var {
        assert!(!parts.is_empty());
        let first = self.shape(parts[0]).to_vec();
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                assert!(d == axis || a == b, "concat shape mismatch on dim {d}");
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let a = self.shape(p)[axis];
                let d = self.value(p).data();
                out.extend_from_slice(&d[o * a * inner..(o + 1) * a * inner]);
            }
        }
        self.push(
            Tensor::new(&shape, out),
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(start + len <= s[axis], "narrow out of range");
        let (outer, a, inner) = split_axis(&s, axis);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * a * inner + start * inner;
            out.extend_from_slice(&d[base..base + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::new(&shape, out), Op::Narrow { x, axis, start }, &[x])
    }

    /// `[N,C] → [N,C,H,W]`, each channel a constant plane.
    pub fn broadcast_plane(&mut self, x: Var, h: usize, w: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 2);
        let d = self.value(x).data();
        let mut out = Vec::with_capacity(s[0] * s[1] * h * w);
        for &v in d {
            out.extend(std::iter::repeat_n(v, h * w));
        }
        self.push(Tensor::new(&[s[0], s[1], h, w], out), Op::BroadcastPlane(x), &[x])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).reshape(shape);
        self.push(t, Op::Reshape(x), &[x])
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        self.push(Tensor::scalar(s), Op::Mean(x), &[x])
    }

    /// `scale · Σ h(target, σ(logits))` with `h` the nonnegative binary
    /// cross-entropy, evaluated stably in logit space.
    pub fn bce_with_logits(&mut self, logits: Var, target: Tensor<T>, scale: f64) -> Var {
        let lv = self.value(logits);
        assert_eq!(lv.shape(), target.shape(), "bce target shape mismatch");
        let s = T::lit(scale);
        let total: T = lv
            .data()
            .iter()
            .zip(target.data())
            .map(|(&z, &y)| softplus(z) - y * z)
            .sum();
        self.push(
            Tensor::scalar(s * total),
            Op::BceLogits {
                logits,
                target,
                scale: s,
            },
            &[logits],
        )
    }

    /// Mean squared difference, differentiable in both arguments.
    pub fn sq_diff_mean(&mut self, a: Var, b: Var) -> Var {
        let d = self.zip_same(a, b, |p, q| (p - q) * (p - q));
        let m = d.data().iter().copied().sum::<T>() / T::lit(d.numel() as f64);
        self.push(Tensor::scalar(m), Op::SqDiffMean(a, b), &[a, b])
    }

    /// `clamp(x + scale·w, 0, 1)`.
    pub fn clamp_add(&mut self, x: Var, w: Var, scale: f64) -> Var {
        let s = T::lit(scale);
        let t = self.zip_same(x, w, |p, q| (p + s * q).max(T::zero()).min(T::one()));
        self.push(t, Op::ClampAdd { x, w, scale: s }, &[x, w])
    }

    pub fn custom(&mut self, inputs: &[Var], value: Tensor<T>, op: Box<dyn CustomOp<T>>) -> Var {
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                op,
            },
            inputs,
        )
    }

    /// Scalar node with value `value` whose gradient with respect to `input` is `grad`.
    pub fn precomputed(&mut self, input: Var, value: T, grad: Vec<T>, name: &'static str) -> Var {
        assert_eq!(grad.len(), self.value(input).numel(), "{name}: gradient size mismatch");
        self.custom(&[input], Tensor::scalar(value), Box::new(Precomputed { name, grad }))
    }

    /// Gradients of the scalar `loss` with respect to every node that requires one.
    pub fn backward(&self, loss: Var) -> Gradients<T> {
        assert_eq!(self.value(loss).numel(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Gradients { grads };
        }
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) || !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        Gradients { grads }
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Vec<T>>], v: Var) -> Option<&'a mut Vec<T>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.numel();
        Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]))
    }

    fn acc_map(&self, grads: &mut [Option<Vec<T>>], v: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(s) = self.slot(grads, v) {
            for (k, (d, &gv)) in s.iter_mut().zip(g).enumerate() {
                *d += f(k, gv);
            }
        }
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Linear { x, w, b } => {
                let xs = self.shape(*x);
                let (n, inp) = (xs[0], xs[1]);
                let o = self.shape(*w)[1];
                if let Some(dx) = self.slot(grads, *x) {
                    gemm(n, o, inp, g, false, self.value(*w).data(), true, dx, T::one());
                }
                if let Some(dw) = self.slot(grads, *w) {
                    gemm(inp, n, o, self.value(*x).data(), true, g, false, dw, T::one());
                }
                if let Some(b) = b {
                    if let Some(db) = self.slot(grads, *b) {
                        for row in g.chunks(o) {
                            for (d, &v) in db.iter_mut().zip(row) {
                                *d += v;
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, stride, pad } => self.conv_backward(*x, *w, *b, *stride, *pad, g, grads),
            Op::DepthToSpace { x, r } => {
                let s = self.shape(*x);
                let (n, cin, h, w) = (s[0], s[1], s[2], s[3]);
                let r = *r;
                let c = cin / (r * r);
                let (ho, wo) = (h * r, w * r);
                if let Some(dx) = self.slot(grads, *x) {
                    for ni in 0..n {
                        for ci in 0..c {
                            for dy in 0..r {
                                for ddx in 0..r {
                                    let src_c = ci * r * r + dy * r + ddx;
                                    let base = (ni * cin + src_c) * h * w;
                                    for y in 0..h {
                                        let orow = ((ni * c + ci) * ho + y * r + dy) * wo;
                                        for xi in 0..w {
                                            dx[base + y * w + xi] += g[orow + xi * r + ddx];
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc_map(grads, *a, g, |_, v| v);
                self.acc_map(grads, *b, g, |_, v| v);
            }
            Op::Sub(a, b) => {
                self.acc_map(grads, *a, g, |_, v| v);
                self.acc_map(grads, *b, g, |_, v| -v);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc_map(grads, *a, g, |k, v| v * bv[k]);
                self.acc_map(grads, *b, g, |k, v| v * av[k]);
            }
            Op::Affine { x, scale } => self.acc_map(grads, *x, g, |_, v| v * *scale),
            Op::Sigmoid(x) => self.acc_map(grads, *x, g, |k, v| v * out[k] * (T::one() - out[k])),
            Op::Tanh(x) => self.acc_map(grads, *x, g, |k, v| v * (T::one() - out[k] * out[k])),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |k, v| if xv[k] > T::zero() { v } else { T::zero() });
            }
            Op::LeakyRelu(x, s) => {
                let xv = self.value(*x).data();
                self.acc_map(grads, *x, g, |k, v| if xv[k] > T::zero() { v } else { v * *s });
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let (outer, total, inner) = split_axis(shape, *axis);
                let mut off = 0;
                for &p in parts {
                    let a = self.shape(p)[*axis];
                    if let Some(dp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + off) * inner..(o * total + off + a) * inner];
                            for (d, &v) in dp[o * a * inner..(o + 1) * a * inner].iter_mut().zip(src) {
                                *d += v;
                            }
                        }
                    }
                    off += a;
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.shape(*x).to_vec();
                let len = node.value.shape()[*axis];
                let (outer, a, inner) = split_axis(&xs, *axis);
                if let Some(dx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        let base = o * a * inner + start * inner;
                        let src = &g[o * len * inner..(o + 1) * len * inner];
                        for (d, &v) in dx[base..base + len * inner].iter_mut().zip(src) {
                            *d += v;
                        }
                    }
                }
            }
            Op::BroadcastPlane(x) => {
                let s = node.value.shape();
                let plane = s[2] * s[3];
                if let Some(dx) = self.slot(grads, *x) {
                    for (d, chunk) in dx.iter_mut().zip(g.chunks(plane)) {
                        *d += chunk.iter().copied().sum::<T>();
                    }
                }
            }
            Op::Reshape(x) => self.acc_map(grads, *x, g, |_, v| v),
            Op::Sum(x) => {
                let g0 = g[0];
                self.acc_map_const(grads, *x, g0);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                let g0 = g[0] / T::lit(n as f64);
                self.acc_map_const(grads, *x, g0);
            }
            Op::BceLogits { logits, target, scale } => {
                let lv = self.value(*logits).data();
                let tv = target.data();
                let c = g[0] * *scale;
                if let Some(d) = self.slot(grads, *logits) {
                    for ((d, &z), &y) in d.iter_mut().zip(lv).zip(tv) {
                        *d += c * (sigmoid(z) - y);
                    }
                }
            }
            Op::SqDiffMean(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let c = g[0] * T::lit(2.0 / av.len() as f64);
                if let Some(d) = self.slot(grads, *a) {
                    for k in 0..d.len() {
                        d[k] += c * (av[k] - bv[k]);
                    }
                }
                if let Some(d) = self.slot(grads, *b) {
                    for k in 0..d.len() {
                        d[k] -= c * (av[k] - bv[k]);
                    }
                }
            }
            Op::ClampAdd { x, w, scale } => {
                let (xv, wv) = (self.value(*x).data(), self.value(*w).data());
                let inside = |k: usize| {
                    let p = xv[k] + *scale * wv[k];
                    p >= T::zero() && p <= T::one()
                };
                self.acc_map(grads, *x, g, |k, v| if inside(k) { v } else { T::zero() });
                self.acc_map(grads, *w, g, |k, v| if inside(k) { v * *scale } else { T::zero() });
            }
            Op::Custom { inputs, op } => {
                let vals: Vec<&Tensor<T>> = inputs.iter().map(|v| self.value(*v)).collect();
                let needs: Vec<bool> = inputs.iter().map(|v| self.requires_grad(*v)).collect();
                let gin = op.backward(&vals, &node.value, g, &needs);
                assert_eq!(gin.len(), inputs.len(), "{} returned wrong gradient count", op.name());
                for (v, gi) in inputs.iter().zip(gin) {
                    if let Some(gi) = gi {
                        self.acc_map(grads, *v, &gi, |_, x| x);
                    }
                }
            }
        }
    }

    fn acc_map_const(&self, grads: &mut [Option<Vec<T>>], x: Var, c: T) {
        if let Some(d) = self.slot(grads, x) {
            for v in d.iter_mut() {
                *v += c;
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv_backward(
        &self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        pad: usize,
        g: &[T],
        grads: &mut [Option<Vec<T>>],
    ) {
        let geo = self.conv_geom(x, w, stride, pad);
        let ckk = geo.c * geo.k * geo.k;
        let plane = geo.ho * geo.wo;
        let img = geo.c * geo.h * geo.w;
        let direct = geo.direct(stride, pad);
        if let Some(b) = b {
            if let Some(db) = self.slot(grads, b) {
                for ni in 0..geo.n {
                    for (oc, d) in db.iter_mut().enumerate() {
                        let base = (ni * geo.o + oc) * plane;
                        *d += g[base..base + plane].iter().copied().sum::<T>();
                    }
                }
            }
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let need_w = self.requires_grad(w);
        let need_x = self.requires_grad(x);
        let mut col = if direct { Vec::new() } else { vec![T::zero(); ckk * plane] };
        if need_w {
            let mut dw = std::mem::take(self.slot(grads, w).expect("w requires grad"));
            for ni in 0..geo.n {
                let xn = &xv[ni * img..(ni + 1) * img];
                let cols: &[T] = if direct {
                    xn
                } else {
                    im2col(xn, geo.c, geo.h, geo.w, geo.k, stride, pad, geo.ho, geo.wo, &mut col);
                    &col
                };
                let gn = &g[ni * geo.o * plane..(ni + 1) * geo.o * plane];
                gemm(geo.o, plane, ckk, gn, false, cols, true, &mut dw, T::one());
            }
            grads[w.0] = Some(dw);
        }
        if need_x {
            let mut dx = std::mem::take(self.slot(grads, x).expect("x requires grad"));
            for ni in 0..geo.n {
                let gn = &g[ni * geo.o * plane..(ni + 1) * geo.o * plane];
                let dxn = &mut dx[ni * img..(ni + 1) * img];
                if direct {
                    gemm(ckk, geo.o, plane, wv, true, gn, false, dxn, T::one());
                } else {
                    gemm(ckk, geo.o, plane, wv, true, gn, false, &mut col, T::zero());
                    col2im(&col, geo.c, geo.h, geo.w, geo.k, stride, pad, geo.ho, geo.wo, dxn);
                }
            }
            grads[x.0] = Some(dx);
        }
    }
}
