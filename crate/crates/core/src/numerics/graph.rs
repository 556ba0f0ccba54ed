//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and `backward` is a single reverse sweep.

use std::sync::Arc;

use super::tensor::{gemm, Real, Tensor};
use super::NumericsError;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Precomputed trilinear taps: for each query point, eight flat spatial
/// indices into a `[C, X, Y, Z]` grid and their blend weights.
#[derive(Clone, Debug)]
pub struct GridTaps<T> {
    pub spatial: [usize; 3],
    pub index: Vec<[u32; 8]>,
    pub weight: Vec<[T; 8]>,
}

impl<T> GridTaps<T> {
    pub fn len(&self) -> usize {
        self.index.len()
    }

    pub fn is_empty(&self) -> bool {
        self.index.is_empty()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Padding {
    Reflect,
    Valid,
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Exp(Var),
    Log(Var),
    Sqrt(Var),
    Square(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Softplus(Var),
    Clamp(Var, T, T),
    Sum(Var),
    Mean(Var),
    SumAxis(Var, usize),
    BroadcastTo(Var),
    Reshape(Var),
    MatMul(Var, Var),
    Affine(Var, Var, Var),
    Concat(Vec<Var>, usize),
    Narrow(Var, usize, usize),
    GatherRows(Var, Arc<[usize]>),
    Conv2d(Var, Var, Var),
    ReflectPad(Var, usize),
    ResizeBilinear(Var),
    ChannelMean(Var),
    ChannelStd(Var),
    Conv1d {
        x: Var,
        kernel: Arc<[T]>,
        axis: usize,
        padding: Padding,
    },
    GridSample(Var, Arc<GridTaps<T>>),
    RayWeights(Var, Arc<[usize]>),
    RayResidual(Var, Arc<[usize]>),
    SegmentSum(Var, Arc<[usize]>),
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Exp(..) => "exp",
            Op::Log(..) => "log",
            Op::Sqrt(..) => "sqrt",
            Op::Square(..) => "square",
            Op::Relu(..) => "relu",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softplus(..) => "softplus",
            Op::Clamp(..) => "clamp",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::SumAxis(..) => "sum_axis",
            Op::BroadcastTo(..) => "broadcast_to",
            Op::Reshape(..) => "reshape",
            Op::MatMul(..) => "matmul",
            Op::Affine(..) => "affine",
            Op::Concat(..) => "concat",
            Op::Narrow(..) => "narrow",
            Op::GatherRows(..) => "gather_rows",
            Op::Conv2d(..) => "conv2d",
            Op::ReflectPad(..) => "reflect_pad",
            Op::ResizeBilinear(..) => "resize_bilinear",
            Op::ChannelMean(..) => "channel_mean",
            Op::ChannelStd(..) => "channel_std",
            Op::Conv1d { .. } => "conv1d",
            Op::GridSample(..) => "grid_sample",
            Op::RayWeights(..) => "ray_weights",
            Op::RayResidual(..) => "ray_residual",
            Op::SegmentSum(..) => "segment_sum",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by [`Graph::backward`], indexed by leaf [`Var`].
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Moves the gradient of `v` out. Leaves that require gradients but were
    /// not reached by the loss hold zeros.
    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

/// Expression tape.
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

/// Reflects an out-of-range index back into `0..n` (edge not repeated).
pub fn reflect_index(k: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut k = k.rem_euclid(period);
    if k >= n as isize {
        k = period - k;
    }
    k as usize
}

fn bilinear_axis<T: Real>(input: usize, output: usize) -> Vec<(usize, usize, T)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            (i0, i1, T::lit(src - i0 as f64))
        })
        .collect()
}

/// For every output element of a broadcast, the flat index of its source.
fn broadcast_map(from: &[usize], to: &[usize]) -> Vec<usize> {
    let offset = to.len() - from.len();
    let mut src_strides = vec![0usize; to.len()];
    let mut stride = 1;
    for d in (0..from.len()).rev() {
        src_strides[d + offset] = if from[d] == 1 { 0 } else { stride };
        stride *= from[d];
    }
    let total: usize = to.iter().product();
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; to.len()];
    let mut src = 0usize;
    for _ in 0..total {
        map.push(src);
        for d in (0..to.len()).rev() {
            idx[d] += 1;
            src += src_strides[d];
            if idx[d] < to[d] {
                break;
            }
            src -= src_strides[d] * idx[d];
            idx[d] = 0;
        }
    }
    map
}

/// Output rows of a convolution are processed in bands so the unfolded
/// patch matrix stays below this many elements.
const IM2COL_BUDGET: usize = 1 << 22;

fn im2col<T: Real>(
    x: &[T],
    c: usize,
    w: usize,
    k: usize,
    wo: usize,
    rows: std::ops::Range<usize>,
    cols: &mut Vec<T>,
) {
    let band = rows.len() * wo;
    cols.clear();
    cols.resize(c * k * k * band, T::zero());
    let h_stride = w;
    let c_stride = x.len() / c;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let dst = &mut cols[r * band..(r + 1) * band];
                for (bi, y) in rows.clone().enumerate() {
                    let src = &x[ci * c_stride + (y + ki) * h_stride + kj..][..wo];
                    dst[bi * wo..(bi + 1) * wo].copy_from_slice(src);
                }
            }
        }
    }
}

fn col2im<T: Real>(
    cols: &[T],
    c: usize,
    w: usize,
    k: usize,
    wo: usize,
    rows: std::ops::Range<usize>,
    gx: &mut [T],
) {
    let band = rows.len() * wo;
    let c_stride = gx.len() / c;
    for ci in 0..c {
        for ki in 0..k {
            for kj in 0..k {
                let r = (ci * k + ki) * k + kj;
                let src = &cols[r * band..(r + 1) * band];
                for (bi, y) in rows.clone().enumerate() {
                    let dst = &mut gx[ci * c_stride + (y + ki) * w + kj..][..wo];
                    for (d, &s) in dst.iter_mut().zip(&src[bi * wo..(bi + 1) * wo]) {
                        *d += s;
                    }
                }
            }
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
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

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Adds a leaf; it is differentiated when `t.requires_grad()` is set.
    pub fn input(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        let needs_grad = t.requires_grad();
        self.push_raw(t, Op::Leaf, needs_grad)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        self.input(t.with_requires_grad(true))
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, t: Tensor<T>) -> Result<Var, NumericsError> {
        self.input(t.with_requires_grad(false))
    }

    fn push_raw(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Result<Var, NumericsError> {
        if !value.all_finite() {
            return Err(NumericsError::NonFinite {
                node: self.nodes.len(),
                op: op.name(),
            });
        }
        self.nodes.push(Node { value, op, needs_grad });
        Ok(Var(self.nodes.len() - 1))
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Result<Var, NumericsError> {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_raw(value, op, needs_grad)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op<T>,
        f: impl Fn(T, T) -> T,
    ) -> Result<Var, NumericsError> {
        self.same_shape(op.name(), a, b)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        let value = Tensor::new(x.shape().to_vec(), data)?;
        self.push(value, op, &[a, b])
    }

    fn unary(&mut self, a: Var, op: Op<T>, f: impl Fn(T) -> T) -> Result<Var, NumericsError> {
        let value = self.value(a).map(f);
        self.push(value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, Op::Add(a, b), |p, q| p + q)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, Op::Sub(a, b), |p, q| p - q)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, Op::Mul(a, b), |p, q| p * q)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary(a, b, Op::Div(a, b), |p, q| p / q)
    }

    pub fn scale(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        self.unary(a, Op::Scale(a, s), |x| x * s)
    }

    pub fn add_scalar(&mut self, a: Var, s: T) -> Result<Var, NumericsError> {
        self.unary(a, Op::AddScalar(a), |x| x + s)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Exp(a), |x| x.exp())
    }

    pub fn log(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Log(a), |x| x.ln())
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Sqrt(a), |x| x.sqrt())
    }

    pub fn square(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Relu(a), |x| x.max(T::zero()))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: T) -> Result<Var, NumericsError> {
        self.unary(a, Op::LeakyRelu(a, slope), |x| if x > T::zero() { x } else { x * slope })
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, NumericsError> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn clamp(&mut self, a: Var, lo: T, hi: T) -> Result<Var, NumericsError> {
        self.unary(a, Op::Clamp(a, lo, hi), |x| x.max(lo).min(hi))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if t.numel() == 0 {
            return Err(NumericsError::InvalidArgument("mean of empty tensor".into()));
        }
        let m = t.sum() / T::from_usize(t.numel()).unwrap();
        self.push(Tensor::scalar(m), Op::Mean(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var, NumericsError> {
        let t = self.value(a);
        if axis >= t.ndim() {
            return Err(NumericsError::InvalidArgument(format!(
                "sum_axis: axis {axis} of {:?}",
                t.shape()
            )));
        }
        let (outer, len, inner) = split_axis(t.shape(), axis);
        let mut out = vec![T::zero(); outer * inner];
        let d = t.data();
        for o in 0..outer {
            for l in 0..len {
                let src = &d[(o * len + l) * inner..][..inner];
                for (dst, &s) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += s;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape.remove(axis);
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SumAxis(a, axis), &[a])
    }

    /// Numpy-style broadcast: trailing dimensions aligned, size-1 dims expand.
    pub fn broadcast_to(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let from = self.shape(a).to_vec();
        let ok = from.len() <= shape.len()
            && from
                .iter()
                .rev()
                .zip(shape.iter().rev())
                .all(|(&f, &t)| f == t || f == 1);
        if !ok {
            return Err(NumericsError::ShapeMismatch {
                op: "broadcast_to",
                detail: format!("{from:?} -> {shape:?}"),
            });
        }
        let map = broadcast_map(&from, shape);
        let src = self.value(a).data();
        let data = map.iter().map(|&i| src[i]).collect();
        let value = Tensor::new(shape.to_vec(), data)?;
        self.push(value, Op::BroadcastTo(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(value, Op::Reshape(a), &[a])
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                detail: format!("{sa:?} x {sb:?}"),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        gemm(false, false, m, n, k, self.value(a).data(), self.value(b).data(), false, &mut out);
        let value = Tensor::new([m, n], out)?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    /// `x[n,in] * w[in,out] + b[out]`.
    pub fn affine(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 2 || sw.len() != 2 || sx[1] != sw[0] || sb != [sw[1]] {
            return Err(NumericsError::ShapeMismatch {
                op: "affine",
                detail: format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            });
        }
        let (n, k, m) = (sx[0], sx[1], sw[1]);
        let bias = self.value(b).data();
        let mut out = Vec::with_capacity(n * m);
        for _ in 0..n {
            out.extend_from_slice(bias);
        }
        gemm(false, false, n, m, k, self.value(x).data(), self.value(w).data(), true, &mut out);
        let value = Tensor::new([n, m], out)?;
        self.push(value, Op::Affine(x, w, b), &[x, w, b])
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, NumericsError> {
        let first = parts
            .first()
            .ok_or_else(|| NumericsError::InvalidArgument("concat of nothing".into()))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(NumericsError::InvalidArgument(format!("concat axis {axis} of {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == base.len()
                && s.iter().enumerate().all(|(d, &e)| d == axis || e == base[d]);
            if !compatible {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat",
                    detail: format!("{base:?} vs {s:?} on axis {axis}"),
                });
            }
            total += s[axis];
        }
        let (outer, _, inner) = split_axis(&base, axis);
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                out.extend_from_slice(&self.value(p).data()[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Slice `start..start+len` along `axis`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(NumericsError::InvalidArgument(format!(
                "narrow {start}+{len} on axis {axis} of {shape:?}"
            )));
        }
        let (outer, full, inner) = split_axis(&shape, axis);
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            out.extend_from_slice(&src[(o * full + start) * inner..(o * full + start + len) * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        let value = Tensor::new(new_shape, out)?;
        self.push(value, Op::Narrow(a, axis, start), &[a])
    }

    /// Selects rows (first-axis slices) by index; repeated indices allowed.
    pub fn gather_rows(&mut self, a: Var, rows: Arc<[usize]>) -> Result<Var, NumericsError> {
        let shape = self.shape(a).to_vec();
        if shape.is_empty() {
            return Err(NumericsError::InvalidArgument("gather_rows on scalar".into()));
        }
        let inner: usize = shape[1..].iter().product();
        let src = self.value(a).data();
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows.iter() {
            if r >= shape[0] {
                return Err(NumericsError::InvalidArgument(format!(
                    "gather_rows: row {r} of {}",
                    shape[0]
                )));
            }
            out.extend_from_slice(&src[r * inner..(r + 1) * inner]);
        }
        let mut new_shape = shape;
        new_shape[0] = rows.len();
        let value = Tensor::new(new_shape, out)?;
        self.push(value, Op::GatherRows(a, rows), &[a])
    }

    /// Unpadded 2D convolution of one `[C,H,W]` image with `[O,C,k,k]`
    /// weights and `[O]` bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        let ok = sx.len() == 3
            && sw.len() == 4
            && sw[1] == sx[0]
            && sw[2] == sw[3]
            && sb == [sw[0]]
            && sx[1] >= sw[2]
            && sx[2] >= sw[3];
        if !ok {
            return Err(NumericsError::ShapeMismatch {
                op: "conv2d",
                detail: format!("x {sx:?}, w {sw:?}, b {sb:?}"),
            });
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        let (ho, wo) = (h - k + 1, wd - k + 1);
        let xd = self.value(x).data();
        let wdt = self.value(w).data();
        let bias = self.value(b).data();
        let mut out = vec![T::zero(); o * ho * wo];
        let ckk = c * k * k;
        let band_rows = (IM2COL_BUDGET / (ckk * wo).max(1)).clamp(1, ho);
        let mut cols = Vec::new();
        let mut band_out = Vec::new();
        let mut y0 = 0;
        while y0 < ho {
            let y1 = (y0 + band_rows).min(ho);
            im2col(xd, c, wd, k, wo, y0..y1, &mut cols);
            let band = (y1 - y0) * wo;
            band_out.clear();
            band_out.resize(o * band, T::zero());
            gemm(false, false, o, band, ckk, wdt, &cols, false, &mut band_out);
            for oc in 0..o {
                let dst = &mut out[oc * ho * wo + y0 * wo..][..band];
                for (d, &s) in dst.iter_mut().zip(&band_out[oc * band..(oc + 1) * band]) {
                    *d = s + bias[oc];
                }
            }
            y0 = y1;
        }
        let value = Tensor::new([o, ho, wo], out)?;
        self.push(value, Op::Conv2d(x, w, b), &[x, w, b])
    }

    /// Mirror padding of the two spatial axes of a `[C,H,W]` image.
    pub fn reflect_pad(&mut self, x: Var, pad: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || pad >= s[1] || pad >= s[2] {
            return Err(NumericsError::InvalidArgument(format!("reflect_pad {pad} of {s:?}")));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * hp * wp);
        for ci in 0..c {
            for i in 0..hp {
                let si = reflect_index(i as isize - pad as isize, h);
                for j in 0..wp {
                    let sj = reflect_index(j as isize - pad as isize, w);
                    out.push(src[(ci * h + si) * w + sj]);
                }
            }
        }
        let value = Tensor::new([c, hp, wp], out)?;
        self.push(value, Op::ReflectPad(x, pad), &[x])
    }

    /// Bilinear resampling of a `[C,H,W]` image (half-pixel centers).
    pub fn resize_bilinear(&mut self, x: Var, out_h: usize, out_w: usize) -> Result<Var, NumericsError> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || out_h == 0 || out_w == 0 || s[1] == 0 || s[2] == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "resize {s:?} -> {out_h}x{out_w}"
            )));
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        let ry = bilinear_axis::<T>(h, out_h);
        let rx = bilinear_axis::<T>(w, out_w);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(c * out_h * out_w);
        for ci in 0..c {
            let plane = &src[ci * h * w..(ci + 1) * h * w];
            for &(y0, y1, fy) in &ry {
                for &(x0, x1, fx) in &rx {
                    let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (T::one() - fy) + bot * fy);
                }
            }
        }
        let value = Tensor::new([c, out_h, out_w], out)?;
        self.push(value, Op::ResizeBilinear(x), &[x])
    }

    /// Per-channel mean over all trailing axes: `[C,...] -> [C]`.
    pub fn channel_mean(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (c, n) = Self::channel_dims(t)?;
        let nf = T::from_usize(n).unwrap();
        let out = t.data().chunks(n).map(|ch| ch.iter().copied().sum::<T>() / nf).collect();
        let value = Tensor::new([c], out)?;
        self.push(value, Op::ChannelMean(x), &[x])
    }

    /// Per-channel population standard deviation: `[C,...] -> [C]`.
    pub fn channel_std(&mut self, x: Var) -> Result<Var, NumericsError> {
        let t = self.value(x);
        let (c, n) = Self::channel_dims(t)?;
        let nf = T::from_usize(n).unwrap();
        let out = t
            .data()
            .chunks(n)
            .map(|ch| {
                let mu = ch.iter().copied().sum::<T>() / nf;
                let var = ch.iter().map(|&v| (v - mu) * (v - mu)).sum::<T>() / nf;
                var.sqrt()
            })
            .collect();
        let value = Tensor::new([c], out)?;
        self.push(value, Op::ChannelStd(x), &[x])
    }

    fn channel_dims(t: &Tensor<T>) -> Result<(usize, usize), NumericsError> {
        if t.ndim() < 2 || t.shape()[0] == 0 || t.numel() == 0 {
            return Err(NumericsError::InvalidArgument(format!(
                "channel statistics need [C,...] with C > 0, got {:?}",
                t.shape()
            )));
        }
        let c = t.shape()[0];
        Ok((c, t.numel() / c))
    }

    /// 1D correlation with `kernel` (odd length) along `axis`.
    pub fn conv1d_axis(
        &mut self,
        x: Var,
        kernel: Arc<[T]>,
        axis: usize,
        padding: Padding,
    ) -> Result<Var, NumericsError> {
        let shape = self.shape(x).to_vec();
        let klen = kernel.len();
        if klen % 2 == 0 || axis >= shape.len() {
            return Err(NumericsError::InvalidArgument(format!(
                "conv1d_axis: kernel {klen} on axis {axis} of {shape:?}"
            )));
        }
        let r = klen / 2;
        let (outer, len, inner) = split_axis(&shape, axis);
        let out_len = match padding {
            Padding::Reflect => len,
            Padding::Valid => {
                if len < klen {
                    return Err(NumericsError::InvalidArgument(format!(
                        "conv1d_axis: axis length {len} shorter than kernel {klen}"
                    )));
                }
                len - klen + 1
            }
        };
        let src = self.value(x).data();
        let mut out = vec![T::zero(); outer * out_len * inner];
        for o in 0..outer {
            for i in 0..out_len {
                let dst = &mut out[(o * out_len + i) * inner..][..inner];
                for (kk, &wk) in kernel.iter().enumerate() {
                    let si = match padding {
                        Padding::Reflect => reflect_index(i as isize + kk as isize - r as isize, len),
                        Padding::Valid => i + kk,
                    };
                    let s = &src[(o * len + si) * inner..][..inner];
                    for (d, &v) in dst.iter_mut().zip(s) {
                        *d += wk * v;
                    }
                }
            }
        }
        let mut new_shape = shape;
        new_shape[axis] = out_len;
        let value = Tensor::new(new_shape, out)?;
        self.push(
            value,
            Op::Conv1d {
                x,
                kernel,
                axis,
                padding,
            },
            &[x],
        )
    }

    /// Blends grid values at precomputed taps: `[C,X,Y,Z] -> [N,C]`.
    pub fn grid_sample(&mut self, grid: Var, taps: Arc<GridTaps<T>>) -> Result<Var, NumericsError> {
        let s = self.shape(grid).to_vec();
        if s.len() != 4 || s[1..] != taps.spatial {
            return Err(NumericsError::ShapeMismatch {
                op: "grid_sample",
                detail: format!("grid {s:?} vs taps {:?}", taps.spatial),
            });
        }
        let c = s[0];
        let plane: usize = taps.spatial.iter().product();
        let g = self.value(grid).data();
        let mut out = Vec::with_capacity(taps.len() * c);
        for (idx, wt) in taps.index.iter().zip(&taps.weight) {
            for ci in 0..c {
                let p = &g[ci * plane..(ci + 1) * plane];
                let mut acc = T::zero();
                for k in 0..8 {
                    acc += wt[k] * p[idx[k] as usize];
                }
                out.push(acc);
            }
        }
        let value = Tensor::new([taps.len(), c], out)?;
        self.push(value, Op::GridSample(grid, taps), &[grid])
    }

    fn check_segments(&self, op: &'static str, n: usize, offsets: &[usize]) -> Result<(), NumericsError> {
        let ok = !offsets.is_empty()
            && offsets[0] == 0
            && *offsets.last().unwrap() == n
            && offsets.windows(2).all(|w| w[0] <= w[1]);
        if ok {
            Ok(())
        } else {
            Err(NumericsError::InvalidArgument(format!(
                "{op}: offsets do not partition {n} samples"
            )))
        }
    }

    /// Per-sample compositing weights `T_i * alpha_i` for rays whose samples
    /// occupy `offsets[r]..offsets[r+1]`.
    pub fn ray_weights(&mut self, alpha: Var, offsets: Arc<[usize]>) -> Result<Var, NumericsError> {
        let a = self.value(alpha);
        if a.ndim() != 1 {
            return Err(NumericsError::InvalidArgument("ray_weights wants [N] alphas".into()));
        }
        self.check_segments("ray_weights", a.numel(), &offsets)?;
        let ad = a.data();
        let mut out = vec![T::zero(); ad.len()];
        for seg in offsets.windows(2) {
            let mut trans = T::one();
            for i in seg[0]..seg[1] {
                out[i] = trans * ad[i];
                trans *= T::one() - ad[i];
            }
        }
        let value = Tensor::new([ad.len()], out)?;
        self.push(value, Op::RayWeights(alpha, offsets), &[alpha])
    }

    /// Residual transmittance `prod(1 - alpha_i)` per ray: `[N] -> [R]`.
    pub fn ray_residual(&mut self, alpha: Var, offsets: Arc<[usize]>) -> Result<Var, NumericsError> {
        let a = self.value(alpha);
        if a.ndim() != 1 {
            return Err(NumericsError::InvalidArgument("ray_residual wants [N] alphas".into()));
        }
        self.check_segments("ray_residual", a.numel(), &offsets)?;
        let ad = a.data();
        let out: Vec<T> = offsets
            .windows(2)
            .map(|seg| ad[seg[0]..seg[1]].iter().fold(T::one(), |t, &x| t * (T::one() - x)))
            .collect();
        let value = Tensor::new([out.len()], out)?;
        self.push(value, Op::RayResidual(alpha, offsets), &[alpha])
    }

    /// Sums rows within each segment: `[N,...] -> [R,...]`.
    pub fn segment_sum(&mut self, x: Var, offsets: Arc<[usize]>) -> Result<Var, NumericsError> {
        let t = self.value(x);
        if t.ndim() == 0 {
            return Err(NumericsError::InvalidArgument("segment_sum on scalar".into()));
        }
        self.check_segments("segment_sum", t.shape()[0], &offsets)?;
        let inner: usize = t.shape()[1..].iter().product();
        let d = t.data();
        let r = offsets.len() - 1;
        let mut out = vec![T::zero(); r * inner];
        for (ri, seg) in offsets.windows(2).enumerate() {
            let dst = &mut out[ri * inner..(ri + 1) * inner];
            for i in seg[0]..seg[1] {
                for (o, &v) in dst.iter_mut().zip(&d[i * inner..(i + 1) * inner]) {
                    *o += v;
                }
            }
        }
        let mut shape = t.shape().to_vec();
        shape[0] = r;
        let value = Tensor::new(shape, out)?;
        self.push(value, Op::SegmentSum(x, offsets), &[x])
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, NumericsError> {
        if self.value(loss).numel() != 1 {
            return Err(NumericsError::InvalidArgument(format!(
                "backward from non-scalar of shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(Tensor::full(self.shape(loss).to_vec(), T::one()));
        }
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !g.all_finite() {
                return Err(NumericsError::NonFinite {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
            } else {
                self.propagate(i, &g, &mut grads);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad && grads[i].is_none() {
                grads[i] = Some(Tensor::zeros(node.value.shape().to_vec()));
            }
        }
        Ok(Gradients { grads })
    }

    fn slot<'a>(&self, grads: &'a mut [Option<Tensor<T>>], v: Var) -> Option<&'a mut [T]> {
        if !self.nodes[v.0].needs_grad {
            return None;
        }
        let entry = &mut grads[v.0];
        if entry.is_none() {
            *entry = Some(Tensor::zeros(self.shape(v).to_vec()));
        }
        entry.as_mut().map(|t| t.data_mut())
    }

    fn unary_grad(&self, grads: &mut [Option<Tensor<T>>], a: Var, g: &[T], f: impl Fn(usize, T) -> T) {
        if let Some(ga) = self.slot(grads, a) {
            for (i, (d, &gi)) in ga.iter_mut().zip(g).enumerate() {
                *d += f(i, gi);
            }
        }
    }

    fn propagate(&self, i: usize, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let y = self.nodes[i].value.data();
        let g = g.data();
        let val = |v: Var| self.nodes[v.0].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.unary_grad(grads, *a, g, |_, gi| gi);
                self.unary_grad(grads, *b, g, |_, gi| gi);
            }
            Op::Sub(a, b) => {
                self.unary_grad(grads, *a, g, |_, gi| gi);
                self.unary_grad(grads, *b, g, |_, gi| -gi);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.unary_grad(grads, *a, g, |k, gi| gi * bv[k]);
                self.unary_grad(grads, *b, g, |k, gi| gi * av[k]);
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(*a), val(*b));
                self.unary_grad(grads, *a, g, |k, gi| gi / bv[k]);
                self.unary_grad(grads, *b, g, |k, gi| -gi * av[k] / (bv[k] * bv[k]));
            }
            Op::Scale(a, s) => self.unary_grad(grads, *a, g, |_, gi| gi * *s),
            Op::AddScalar(a) => self.unary_grad(grads, *a, g, |_, gi| gi),
            Op::Exp(a) => self.unary_grad(grads, *a, g, |k, gi| gi * y[k]),
            Op::Log(a) => {
                let av = val(*a);
                self.unary_grad(grads, *a, g, |k, gi| gi / av[k]);
            }
            Op::Sqrt(a) => self.unary_grad(grads, *a, g, |k, gi| {
                if y[k] > T::zero() {
                    gi / (T::lit(2.0) * y[k])
                } else {
                    T::zero()
                }
            }),
            Op::Square(a) => {
                let av = val(*a);
                self.unary_grad(grads, *a, g, |k, gi| T::lit(2.0) * av[k] * gi);
            }
            Op::Relu(a) => {
                let av = val(*a);
                self.unary_grad(grads, *a, g, |k, gi| if av[k] > T::zero() { gi } else { T::zero() });
            }
            Op::LeakyRelu(a, s) => {
                let av = val(*a);
                self.unary_grad(grads, *a, g, |k, gi| if av[k] > T::zero() { gi } else { gi * *s });
            }
            Op::Sigmoid(a) => self.unary_grad(grads, *a, g, |k, gi| gi * y[k] * (T::one() - y[k])),
            Op::Softplus(a) => {
                let av = val(*a);
                self.unary_grad(grads, *a, g, |k, gi| gi * sigmoid(av[k]));
            }
            Op::Clamp(a, lo, hi) => {
                let av = val(*a);
                self.unary_grad(grads, *a, g, |k, gi| {
                    if av[k] >= *lo && av[k] <= *hi {
                        gi
                    } else {
                        T::zero()
                    }
                });
            }
            Op::Sum(a) => self.unary_grad(grads, *a, &vec![g[0]; val(*a).len()], |_, gi| gi),
            Op::Mean(a) => {
                let n = T::from_usize(val(*a).len()).unwrap();
                let gi = g[0] / n;
                if let Some(ga) = self.slot(grads, *a) {
                    ga.iter_mut().for_each(|d| *d += gi);
                }
            }
            Op::SumAxis(a, axis) => {
                let (outer, len, inner) = split_axis(self.shape(*a), *axis);
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        for l in 0..len {
                            let dst = &mut ga[(o * len + l) * inner..][..inner];
                            for (d, &s) in dst.iter_mut().zip(&g[o * inner..(o + 1) * inner]) {
                                *d += s;
                            }
                        }
                    }
                }
            }
            Op::BroadcastTo(a) => {
                let map = broadcast_map(self.shape(*a), self.nodes[i].value.shape());
                if let Some(ga) = self.slot(grads, *a) {
                    for (&src, &gi) in map.iter().zip(g) {
                        ga[src] += gi;
                    }
                }
            }
            Op::Reshape(a) => self.unary_grad(grads, *a, g, |_, gi| gi),
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a).to_vec(), self.shape(*b).to_vec());
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (av, bv) = (val(*a), val(*b));
                if let Some(ga) = self.slot(grads, *a) {
                    gemm(false, true, m, k, n, g, bv, true, ga);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm(true, false, k, n, m, av, g, true, gb);
                }
            }
            Op::Affine(x, w, b) => {
                let (sx, sw) = (self.shape(*x).to_vec(), self.shape(*w).to_vec());
                let (n, k, m) = (sx[0], sx[1], sw[1]);
                let (xv, wv) = (val(*x), val(*w));
                if let Some(gx) = self.slot(grads, *x) {
                    gemm(false, true, n, k, m, g, wv, true, gx);
                }
                if let Some(gw) = self.slot(grads, *w) {
                    gemm(true, false, k, m, n, xv, g, true, gw);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for row in g.chunks(m) {
                        for (d, &s) in gb.iter_mut().zip(row) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let out_shape = self.nodes[i].value.shape();
                let (outer, total, inner) = split_axis(out_shape, *axis);
                let mut start = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + start) * inner..][..len * inner];
                            for (d, &s) in gp[o * len * inner..][..len * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                    start += len;
                }
            }
            Op::Narrow(a, axis, start) => {
                let (outer, full, inner) = split_axis(self.shape(*a), *axis);
                let len = self.nodes[i].value.shape()[*axis];
                if let Some(ga) = self.slot(grads, *a) {
                    for o in 0..outer {
                        let dst = &mut ga[(o * full + start) * inner..][..len * inner];
                        for (d, &s) in dst.iter_mut().zip(&g[o * len * inner..][..len * inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::GatherRows(a, rows) => {
                let inner: usize = self.shape(*a)[1..].iter().product();
                if let Some(ga) = self.slot(grads, *a) {
                    for (k, &r) in rows.iter().enumerate() {
                        for (d, &s) in ga[r * inner..][..inner].iter_mut().zip(&g[k * inner..][..inner]) {
                            *d += s;
                        }
                    }
                }
            }
            Op::Conv2d(x, w, b) => self.conv2d_grad(i, *x, *w, *b, g, grads),
            Op::ReflectPad(x, pad) => {
                let s = self.shape(*x).to_vec();
                let (c, h, w) = (s[0], s[1], s[2]);
                let (hp, wp) = (h + 2 * pad, w + 2 * pad);
                if let Some(gx) = self.slot(grads, *x) {
                    for ci in 0..c {
                        for r in 0..hp {
                            let si = reflect_index(r as isize - *pad as isize, h);
                            for col in 0..wp {
                                let sj = reflect_index(col as isize - *pad as isize, w);
                                gx[(ci * h + si) * w + sj] += g[(ci * hp + r) * wp + col];
                            }
                        }
                    }
                }
            }
            Op::ResizeBilinear(x) => {
                let s = self.shape(*x).to_vec();
                let os = self.nodes[i].value.shape();
                let (c, h, w, oh, ow) = (s[0], s[1], s[2], os[1], os[2]);
                let ry = bilinear_axis::<T>(h, oh);
                let rx = bilinear_axis::<T>(w, ow);
                if let Some(gx) = self.slot(grads, *x) {
                    let mut k = 0;
                    for ci in 0..c {
                        let plane = &mut gx[ci * h * w..(ci + 1) * h * w];
                        for &(y0, y1, fy) in &ry {
                            for &(x0, x1, fx) in &rx {
                                let gi = g[k];
                                k += 1;
                                let (top, bot) = (gi * (T::one() - fy), gi * fy);
                                plane[y0 * w + x0] += top * (T::one() - fx);
                                plane[y0 * w + x1] += top * fx;
                                plane[y1 * w + x0] += bot * (T::one() - fx);
                                plane[y1 * w + x1] += bot * fx;
                            }
                        }
                    }
                }
            }
            Op::ChannelMean(x) => {
                let t = &self.nodes[x.0].value;
                let n = t.numel() / t.shape()[0];
                let nf = T::from_usize(n).unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for (ci, ch) in gx.chunks_mut(n).enumerate() {
                        let gi = g[ci] / nf;
                        ch.iter_mut().for_each(|d| *d += gi);
                    }
                }
            }
            Op::ChannelStd(x) => {
                let t = &self.nodes[x.0].value;
                let n = t.numel() / t.shape()[0];
                let nf = T::from_usize(n).unwrap();
                let xv = t.data();
                if let Some(gx) = self.slot(grads, *x) {
                    for (ci, ch) in gx.chunks_mut(n).enumerate() {
                        let sigma = y[ci];
                        if sigma <= T::zero() {
                            continue;
                        }
                        let src = &xv[ci * n..(ci + 1) * n];
                        let mu = src.iter().copied().sum::<T>() / nf;
                        let coef = g[ci] / (nf * sigma);
                        for (d, &v) in ch.iter_mut().zip(src) {
                            *d += coef * (v - mu);
                        }
                    }
                }
            }
            Op::Conv1d {
                x,
                kernel,
                axis,
                padding,
            } => {
                let shape = self.shape(*x).to_vec();
                let (outer, len, inner) = split_axis(&shape, *axis);
                let out_len = self.nodes[i].value.shape()[*axis];
                let r = kernel.len() / 2;
                if let Some(gx) = self.slot(grads, *x) {
                    for o in 0..outer {
                        for oi in 0..out_len {
                            let src = &g[(o * out_len + oi) * inner..][..inner];
                            for (kk, &wk) in kernel.iter().enumerate() {
                                let si = match padding {
                                    Padding::Reflect => {
                                        reflect_index(oi as isize + kk as isize - r as isize, len)
                                    }
                                    Padding::Valid => oi + kk,
                                };
                                let dst = &mut gx[(o * len + si) * inner..][..inner];
                                for (d, &s) in dst.iter_mut().zip(src) {
                                    *d += wk * s;
                                }
                            }
                        }
                    }
                }
            }
            Op::GridSample(grid, taps) => {
                let c = self.shape(*grid)[0];
                let plane: usize = taps.spatial.iter().product();
                if let Some(gg) = self.slot(grads, *grid) {
                    for (n, (idx, wt)) in taps.index.iter().zip(&taps.weight).enumerate() {
                        for ci in 0..c {
                            let gi = g[n * c + ci];
                            if gi == T::zero() {
                                continue;
                            }
                            let p = &mut gg[ci * plane..(ci + 1) * plane];
                            for k in 0..8 {
                                p[idx[k] as usize] += wt[k] * gi;
                            }
                        }
                    }
                }
            }
            Op::RayWeights(alpha, offsets) => {
                let av = val(*alpha);
                if let Some(ga) = self.slot(grads, *alpha) {
                    let mut trans = Vec::new();
                    for seg in offsets.windows(2) {
                        let (s, e) = (seg[0], seg[1]);
                        trans.clear();
                        let mut t = T::one();
                        for &a in &av[s..e] {
                            trans.push(t);
                            t *= T::one() - a;
                        }
                        // tail = sum over later samples of g_i * alpha_i * prod(1 - alpha_j), k < j < i
                        let mut tail = T::zero();
                        for k in (s..e).rev() {
                            ga[k] += trans[k - s] * (g[k] - tail);
                            tail = g[k] * av[k] + (T::one() - av[k]) * tail;
                        }
                    }
                }
            }
            Op::RayResidual(alpha, offsets) => {
                let av = val(*alpha);
                if let Some(ga) = self.slot(grads, *alpha) {
                    let mut trans = Vec::new();
                    for (r, seg) in offsets.windows(2).enumerate() {
                        let (s, e) = (seg[0], seg[1]);
                        trans.clear();
                        let mut t = T::one();
                        for &a in &av[s..e] {
                            trans.push(t);
                            t *= T::one() - a;
                        }
                        let mut after = T::one();
                        for k in (s..e).rev() {
                            ga[k] -= g[r] * trans[k - s] * after;
                            after *= T::one() - av[k];
                        }
                    }
                }
            }
            Op::SegmentSum(x, offsets) => {
                let inner: usize = self.shape(*x)[1..].iter().product();
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, seg) in offsets.windows(2).enumerate() {
                        let src = &g[r * inner..(r + 1) * inner];
                        for k in seg[0]..seg[1] {
                            for (d, &s) in gx[k * inner..(k + 1) * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    }
                }
            }
        }
    }

    fn conv2d_grad(&self, i: usize, x: Var, w: Var, b: Var, g: &[T], grads: &mut [Option<Tensor<T>>]) {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        let (c, wd) = (sx[0], sx[2]);
        let (o, k) = (sw[0], sw[2]);
        let os = self.nodes[i].value.shape();
        let (ho, wo) = (os[1], os[2]);
        let ckk = c * k * k;
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let band_rows = (IM2COL_BUDGET / (ckk * wo).max(1)).clamp(1, ho);
        let mut cols = Vec::new();
        let mut gband = Vec::new();
        let mut gcols = Vec::new();
        let mut y0 = 0;
        while y0 < ho {
            let y1 = (y0 + band_rows).min(ho);
            let band = (y1 - y0) * wo;
            gband.clear();
            for oc in 0..o {
                gband.extend_from_slice(&g[oc * ho * wo + y0 * wo..][..band]);
            }
            if self.nodes[w.0].needs_grad {
                im2col(xv, c, wd, k, wo, y0..y1, &mut cols);
                if let Some(gw) = self.slot(grads, w) {
                    gemm(false, true, o, ckk, band, &gband, &cols, true, gw);
                }
            }
            if self.nodes[x.0].needs_grad {
                gcols.clear();
                gcols.resize(ckk * band, T::zero());
                gemm(true, false, ckk, band, o, wv, &gband, false, &mut gcols);
                if let Some(gx) = self.slot(grads, x) {
                    col2im(&gcols, c, wd, k, wo, y0..y1, gx);
                }
            }
            y0 = y1;
        }
        if let Some(gb) = self.slot(grads, b) {
            for (oc, d) in gb.iter_mut().enumerate() {
                *d += g[oc * ho * wo..(oc + 1) * ho * wo].iter().copied().sum::<T>();
            }
        }
    }
}

/// Builds a graph over `params` (all marked differentiable), evaluates the
/// scalar it returns, and differentiates it. Unused parameters get zeros.
pub fn forward_backward<T: Real>(
    params: &[Tensor<T>],
    build: impl FnOnce(&mut Graph<T>, &[Var]) -> Result<Var, NumericsError>,
) -> Result<(T, Vec<Tensor<T>>), NumericsError> {
    let mut graph = Graph::new();
    let vars = params
        .iter()
        .map(|p| graph.param(p.clone()))
        .collect::<Result<Vec<_>, _>>()?;
    let loss = build(&mut graph, &vars)?;
    let value = graph.value(loss).item();
    let mut grads = graph.backward(loss)?;
    let out = vars
        .iter()
        .zip(params)
        .map(|(&v, p)| grads.take(v).unwrap_or_else(|| Tensor::zeros(p.shape().to_vec())))
        .collect();
    Ok((value, out))
}
