use super::kernels::{self, Geometry, GroupNormCache};
use super::{NumericsError, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PoolMode {
    Max,
    Average,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Activation {
    Relu,
    Sigmoid,
    /// Softmax along the temporal axis of a `[C, T, H, W]` tensor.
    SoftmaxTemporal,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Conv { x: Var, w: Var, b: Var, geom: Geometry },
    Deconv { x: Var, w: Var, b: Var, geom: Geometry },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, kernel: [usize; 3] },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, cache: GroupNormCache<F> },
    Relu { x: Var },
    Sigmoid { x: Var },
    Softmax { x: Var },
    Linear { x: Var, w: Var, b: Var },
    Concat { parts: Vec<Var> },
    Reshape { x: Var },
    Gather { x: Var, index: Vec<usize> },
    Log { x: Var, lo: F, hi: F },
    OneMinus { x: Var },
    Abs { x: Var },
    Sum { x: Var },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { x: Var, factor: F },
    Expectation { x: Var, scale: F },
    Diff { x: Var, axis: usize },
}

#[derive(Debug)]
struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    requires_grad: bool,
    grad: Option<Tensor<F>>,
}

/// Ordered record of executed operations; `backward` replays it in reverse.
#[derive(Debug, Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn shape_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::ShapeMismatch { op, detail }
}

fn arg_err(op: &'static str, detail: String) -> NumericsError {
    NumericsError::InvalidArgument { op, detail }
}

fn dims3(shape: &[usize]) -> [usize; 3] {
    [shape[1], shape[2], shape[3]]
}

fn add_into<F: Scalar>(acc: &mut Option<Vec<F>>, g: Vec<F>) {
    match acc {
        Some(a) => a.iter_mut().zip(g).for_each(|(x, y)| *x = *x + y),
        None => *acc = Some(g),
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<F>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, false)
    }

    pub fn param(&mut self, value: Tensor<F>) -> Var {
        self.leaf(value, true)
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor<F>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        self.nodes.iter_mut().for_each(|n| n.grad = None);
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad, grad: None });
        Var(self.nodes.len() - 1)
    }

    fn make(&self, shape: Vec<usize>, data: Vec<F>) -> Tensor<F> {
        Tensor::new(shape, data).expect("kernel output matches its computed shape")
    }

    /// Unit-stride cross-correlation. `x: [C_in,T,H,W]`, `w: [C_out,C_in,kt,kh,kw]`.
    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, padding: [usize; 3]) -> Result<Var, NumericsError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 5 {
            return Err(shape_err("conv3d", format!("input {xs:?} / weight {ws:?} must be rank 4 / 5")));
        }
        if ws[1] != xs[0] {
            return Err(shape_err(
                "conv3d",
                format!("input has {} channels but weight {ws:?} expects {}", xs[0], ws[1]),
            ));
        }
        if bs != [ws[0]] {
            return Err(shape_err("conv3d", format!("bias {bs:?} for {} output channels", ws[0])));
        }
        let geom = Geometry::unit([ws[2], ws[3], ws[4]], padding);
        let src = dims3(xs);
        let out = geom
            .correlate_dims(src)
            .ok_or_else(|| shape_err("conv3d", format!("kernel {:?} does not fit input {xs:?}", geom.kernel)))?;
        let (c_in, c_out) = (xs[0], ws[0]);
        let y = kernels::conv_forward(
            self.value(x).data(),
            c_in,
            src,
            self.value(w).data(),
            self.value(b).data(),
            c_out,
            &geom,
            out,
        );
        let value = self.make(vec![c_out, out[0], out[1], out[2]], y);
        Ok(self.push(value, Op::Conv { x, w, b, geom }, &[x, w, b]))
    }

    /// Transposed convolution. `x: [C_in,T,H,W]`, `w: [C_in,C_out,kt,kh,kw]`.
    pub fn deconv3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: [usize; 3],
        padding: [usize; 3],
    ) -> Result<Var, NumericsError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 4 || ws.len() != 5 {
            return Err(shape_err("deconv3d", format!("input {xs:?} / weight {ws:?} must be rank 4 / 5")));
        }
        if ws[0] != xs[0] {
            return Err(shape_err(
                "deconv3d",
                format!("input has {} channels but weight {ws:?} expects {}", xs[0], ws[0]),
            ));
        }
        if bs != [ws[1]] {
            return Err(shape_err("deconv3d", format!("bias {bs:?} for {} output channels", ws[1])));
        }
        if stride.contains(&0) {
            return Err(arg_err("deconv3d", "zero stride".into()));
        }
        let geom = Geometry::new([ws[2], ws[3], ws[4]], stride, padding);
        let small = dims3(xs);
        let big = geom
            .transpose_dims(small)
            .ok_or_else(|| arg_err("deconv3d", format!("non-positive output extent for input {xs:?} with {geom:?}")))?;
        let (c_in, c_out) = (xs[0], ws[1]);
        let y = kernels::deconv_forward(
            self.value(x).data(),
            c_in,
            small,
            self.value(w).data(),
            self.value(b).data(),
            c_out,
            &geom,
            big,
        );
        let value = self.make(vec![c_out, big[0], big[1], big[2]], y);
        Ok(self.push(value, Op::Deconv { x, w, b, geom }, &[x, w, b]))
    }

    /// Non-overlapping pooling (stride equals kernel) over `[C,T,H,W]`.
    pub fn pool3d(&mut self, x: Var, mode: PoolMode, kernel: [usize; 3]) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 {
            return Err(shape_err("pool3d", format!("input {xs:?} must be rank 4")));
        }
        let dims = dims3(&xs);
        for a in 0..3 {
            if kernel[a] == 0 || !dims[a].is_multiple_of(kernel[a]) {
                return Err(arg_err(
                    "pool3d",
                    format!("axis {} of length {} not divisible by kernel {}", a + 1, dims[a], kernel[a]),
                ));
            }
        }
        let out_shape = vec![xs[0], dims[0] / kernel[0], dims[1] / kernel[1], dims[2] / kernel[2]];
        let data = self.value(x).data();
        let (y, op) = match mode {
            PoolMode::Max => {
                let (y, argmax) = kernels::max_pool_forward(data, xs[0], dims, kernel);
                (y, Op::MaxPool { x, argmax })
            }
            PoolMode::Average => (kernels::avg_pool_forward(data, xs[0], dims, kernel), Op::AvgPool { x, kernel }),
        };
        let value = self.make(out_shape, y);
        Ok(self.push(value, op, &[x]))
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let c = xs[0];
        if groups == 0 || !c.is_multiple_of(groups) {
            return Err(arg_err("group_norm", format!("{c} channels not divisible into {groups} groups")));
        }
        if eps <= 0.0 {
            return Err(arg_err("group_norm", format!("eps must be positive, got {eps}")));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err(
                "group_norm",
                format!("affine {:?}/{:?} for {c} channels", self.shape(gamma), self.shape(beta)),
            ));
        }
        let (y, cache) = kernels::group_norm_forward(
            self.value(x).data(),
            c,
            groups,
            self.value(gamma).data(),
            self.value(beta).data(),
            eps,
        );
        let value = self.make(xs, y);
        Ok(self.push(value, Op::GroupNorm { x, gamma, beta, groups, cache }, &[x, gamma, beta]))
    }

    pub fn activation(&mut self, x: Var, kind: Activation) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        let data = self.value(x).data();
        let (y, op) = match kind {
            Activation::Relu => {
                (data.iter().map(|v| if *v > F::zero() { *v } else { F::zero() }).collect(), Op::Relu { x })
            }
            Activation::Sigmoid => {
                (data.iter().map(|v| F::one() / (F::one() + (-*v).exp())).collect(), Op::Sigmoid { x })
            }
            Activation::SoftmaxTemporal => {
                if xs.len() != 4 {
                    return Err(shape_err("softmax_temporal", format!("input {xs:?} has no [C,T,H,W] temporal axis")));
                }
                (kernels::softmax_axis1_forward(data, xs[0], xs[1]), Op::Softmax { x })
            }
        };
        let value = self.make(xs, y);
        Ok(self.push(value, op, &[x]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Relu).expect("relu accepts any shape")
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.activation(x, Activation::Sigmoid).expect("sigmoid accepts any shape")
    }

    /// `w·x + b` for `x: [n]`, `w: [m, n]`, `b: [m]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var, NumericsError> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 1 || ws.len() != 2 || ws[1] != xs[0] || bs != [ws[0]] {
            return Err(shape_err("linear", format!("input {xs:?}, weight {ws:?}, bias {bs:?}")));
        }
        let (m, n) = (ws[0], ws[1]);
        let mut y = self.value(b).data().to_vec();
        F::matmul(m, n, 1, self.value(w).data(), false, self.value(x).data(), false, &mut y, F::one());
        let value = self.make(vec![m], y);
        Ok(self.push(value, Op::Linear { x, w, b }, &[x, w, b]))
    }

    /// Concatenation of `[C_k, T, H, W]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or_else(|| arg_err("concat", "no inputs".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut channels = 0;
        let mut data = Vec::new();
        for p in parts {
            let s = self.shape(*p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat", format!("{s:?} vs trailing {tail:?}")));
            }
            channels += s[0];
            data.extend_from_slice(self.value(*p).data());
        }
        let mut shape = vec![channels];
        shape.extend(tail);
        let value = self.make(shape, data);
        Ok(self.push(value, Op::Concat { parts: parts.to_vec() }, parts))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumericsError> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape { x }, &[x]))
    }

    /// Picks `x[0, index[p], p]` per pixel of a `[1, T, H, W]` tensor; output `[H, W]`.
    pub fn gather_temporal(&mut self, x: Var, bins: &[usize]) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[0] != 1 {
            return Err(shape_err("gather_temporal", format!("input {xs:?} must be [1,T,H,W]")));
        }
        let (t, p) = (xs[1], xs[2] * xs[3]);
        if bins.len() != p {
            return Err(shape_err("gather_temporal", format!("{} bins for {p} pixels", bins.len())));
        }
        if let Some((px, b)) = bins.iter().enumerate().find(|(_, b)| **b >= t) {
            return Err(arg_err("gather_temporal", format!("bin {b} at pixel {px} outside [0,{t})")));
        }
        let index: Vec<usize> = bins.iter().enumerate().map(|(px, b)| b * p + px).collect();
        let data = self.value(x).data();
        let y = index.iter().map(|&i| data[i]).collect();
        let value = self.make(vec![xs[2], xs[3]], y);
        Ok(self.push(value, Op::Gather { x, index }, &[x]))
    }

    /// Elementwise `ln(clamp(x, lo, hi))`; zero gradient where clamped.
    pub fn log_clamped(&mut self, x: Var, lo: F, hi: F) -> Var {
        let y = self.value(x).data().iter().map(|v| v.max(lo).min(hi).ln()).collect();
        let value = self.make(self.shape(x).to_vec(), y);
        self.push(value, Op::Log { x, lo, hi }, &[x])
    }

    pub fn one_minus(&mut self, x: Var) -> Var {
        let y = self.value(x).data().iter().map(|v| F::one() - *v).collect();
        let value = self.make(self.shape(x).to_vec(), y);
        self.push(value, Op::OneMinus { x }, &[x])
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let y = self.value(x).data().iter().map(|v| v.abs()).collect();
        let value = self.make(self.shape(x).to_vec(), y);
        self.push(value, Op::Abs { x }, &[x])
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum { x }, &[x])
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(F, F) -> F,
    ) -> Result<Tensor<F>, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, format!("{:?} vs {:?}", self.shape(a), self.shape(b))));
        }
        let y = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| f(*x, *y)).collect();
        Ok(self.make(self.shape(a).to_vec(), y))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.push(v, Op::Add { a, b }, &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(v, Op::Sub { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let v = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(v, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, factor: F) -> Var {
        let y = self.value(x).data().iter().map(|v| *v * factor).collect();
        let value = self.make(self.shape(x).to_vec(), y);
        self.push(value, Op::Scale { x, factor }, &[x])
    }

    /// `scale · Σ_k k·x[0,k,h,w]` for a `[1,T,H,W]` tensor, 0-based `k`; output `[H, W]`.
    pub fn temporal_expectation(&mut self, x: Var, scale: F) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || xs[0] != 1 {
            return Err(shape_err("temporal_expectation", format!("input {xs:?} must be [1,T,H,W]")));
        }
        let (t, p) = (xs[1], xs[2] * xs[3]);
        let data = self.value(x).data();
        let mut y = vec![F::zero(); p];
        for k in 0..t {
            let kf = F::from_usize(k).expect("bin index");
            for px in 0..p {
                y[px] = y[px] + kf * data[k * p + px];
            }
        }
        y.iter_mut().for_each(|v| *v = *v * scale);
        let value = self.make(vec![xs[2], xs[3]], y);
        Ok(self.push(value, Op::Expectation { x, scale }, &[x]))
    }

    /// Forward difference `x[i+1] - x[i]` along `axis` (0 or 1) of a `[H, W]` map.
    pub fn diff2d(&mut self, x: Var, axis: usize) -> Result<Var, NumericsError> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || axis > 1 {
            return Err(shape_err("diff2d", format!("input {xs:?}, axis {axis}")));
        }
        let (h, w) = (xs[0], xs[1]);
        let data = self.value(x).data();
        let (oh, ow, step) = if axis == 0 { (h - 1, w, w) } else { (h, w - 1, 1) };
        if oh == 0 || ow == 0 {
            // No neighbour pairs along this axis.
            let value = self.make(vec![1], vec![F::zero()]);
            return Ok(self.push(value, Op::Diff { x, axis: usize::MAX }, &[x]));
        }
        let mut y = Vec::with_capacity(oh * ow);
        for i in 0..oh {
            for j in 0..ow {
                let src = i * w + j;
                y.push(data[src + step] - data[src]);
            }
        }
        let value = self.make(vec![oh, ow], y);
        Ok(self.push(value, Op::Diff { x, axis }, &[x]))
    }

    /// Reverse sweep from a single-element `loss`.
    ///
    /// Leaf gradients accumulate across calls until [`Tape::zero_grad`].
    pub fn backward(&mut self, loss: Var) -> Result<(), NumericsError> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(NumericsError::NonScalarLoss { shape: shape.to_vec() });
        }
        let mut grads: Vec<Option<Vec<F>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![F::one()]);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                continue;
            }
            self.propagate(i, g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: Vec<F>, grads: &mut [Option<Vec<F>>]) {
        let needs = |v: Var| self.nodes[v.0].requires_grad;
        let send = |v: Var, gv: Vec<F>, grads: &mut [Option<Vec<F>>]| {
            if self.nodes[v.0].requires_grad {
                add_into(&mut grads[v.0], gv);
            }
        };
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {
                let shape = node.value.shape().to_vec();
                let n = &mut self.nodes[i];
                match &mut n.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(g).for_each(|(a, b)| *a = *a + b),
                    None => n.grad = Some(Tensor::new(shape, g).expect("grad matches leaf shape")),
                }
            }
            Op::Conv { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let xs = self.shape(x);
                let (c_in, src) = (xs[0], dims3(xs));
                let ys = node.value.shape();
                let (c_out, out) = (ys[0], dims3(ys));
                let (dx, dw, db) = kernels::conv_backward(
                    &g,
                    self.value(x).data(),
                    c_in,
                    src,
                    self.value(w).data(),
                    c_out,
                    &geom,
                    out,
                    needs(x),
                    needs(w),
                );
                if let Some(dx) = dx {
                    send(x, dx, grads);
                }
                if let Some(dw) = dw {
                    send(w, dw, grads);
                }
                send(b, db, grads);
            }
            Op::Deconv { x, w, b, geom } => {
                let (x, w, b, geom) = (*x, *w, *b, *geom);
                let xs = self.shape(x);
                let (c_in, small) = (xs[0], dims3(xs));
                let ys = node.value.shape();
                let (c_out, big) = (ys[0], dims3(ys));
                let (dx, dw, db) = kernels::deconv_backward(
                    &g,
                    self.value(x).data(),
                    c_in,
                    small,
                    self.value(w).data(),
                    c_out,
                    &geom,
                    big,
                    needs(x),
                    needs(w),
                );
                if let Some(dx) = dx {
                    send(x, dx, grads);
                }
                if let Some(dw) = dw {
                    send(w, dw, grads);
                }
                send(b, db, grads);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (o, &src) in argmax.iter().enumerate() {
                    dx[src] = dx[src] + g[o];
                }
                let x = *x;
                send(x, dx, grads);
            }
            Op::AvgPool { x, kernel } => {
                let xs = self.shape(*x);
                let dx = kernels::avg_pool_backward(&g, xs[0], dims3(xs), *kernel);
                let x = *x;
                send(x, dx, grads);
            }
            Op::GroupNorm { x, gamma, beta, groups, cache } => {
                let c = node.value.shape()[0];
                let (dx, dg, db) = kernels::group_norm_backward(&g, c, *groups, self.value(*gamma).data(), cache);
                let (x, gamma, beta) = (*x, *gamma, *beta);
                send(x, dx, grads);
                send(gamma, dg, grads);
                send(beta, db, grads);
            }
            Op::Relu { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(v, g)| if *v > F::zero() { *g } else { F::zero() })
                    .collect();
                let x = *x;
                send(x, dx, grads);
            }
            Op::Sigmoid { x } => {
                let dx = node.value.data().iter().zip(&g).map(|(s, g)| *g * *s * (F::one() - *s)).collect();
                let x = *x;
                send(x, dx, grads);
            }
            Op::Softmax { x } => {
                let s = node.value.shape();
                let dx = kernels::softmax_axis1_backward(&g, node.value.data(), s[0], s[1]);
                let x = *x;
                send(x, dx, grads);
            }
            Op::Linear { x, w, b } => {
                let (x, w, b) = (*x, *w, *b);
                let ws = self.shape(w);
                let (m, n) = (ws[0], ws[1]);
                if needs(x) {
                    let mut dx = vec![F::zero(); n];
                    F::matmul(n, m, 1, self.value(w).data(), true, &g, false, &mut dx, F::zero());
                    send(x, dx, grads);
                }
                if needs(w) {
                    let mut dw = vec![F::zero(); m * n];
                    F::matmul(m, 1, n, &g, false, self.value(x).data(), false, &mut dw, F::zero());
                    send(w, dw, grads);
                }
                send(b, g, grads);
            }
            Op::Concat { parts } => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let len = self.value(p).len();
                    send(p, g[offset..offset + len].to_vec(), grads);
                    offset += len;
                }
            }
            Op::Reshape { x } => {
                let x = *x;
                send(x, g, grads);
            }
            Op::Gather { x, index } => {
                let mut dx = vec![F::zero(); self.value(*x).len()];
                for (o, &src) in index.iter().enumerate() {
                    dx[src] = dx[src] + g[o];
                }
                let x = *x;
                send(x, dx, grads);
            }
            Op::Log { x, lo, hi } => {
                let (lo, hi) = (*lo, *hi);
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(v, g)| if *v >= lo && *v <= hi { *g / *v } else { F::zero() })
                    .collect();
                let x = *x;
                send(x, dx, grads);
            }
            Op::OneMinus { x } => {
                let x = *x;
                send(x, g.into_iter().map(|v| -v).collect(), grads);
            }
            Op::Abs { x } => {
                let dx = self
                    .value(*x)
                    .data()
                    .iter()
                    .zip(&g)
                    .map(|(v, g)| {
                        if *v > F::zero() {
                            *g
                        } else if *v < F::zero() {
                            -*g
                        } else {
                            F::zero()
                        }
                    })
                    .collect();
                let x = *x;
                send(x, dx, grads);
            }
            Op::Sum { x } => {
                let x = *x;
                let n = self.value(x).len();
                send(x, vec![g[0]; n], grads);
            }
            Op::Add { a, b } => {
                let (a, b) = (*a, *b);
                send(a, g.clone(), grads);
                send(b, g, grads);
            }
            Op::Sub { a, b } => {
                let (a, b) = (*a, *b);
                send(a, g.clone(), grads);
                send(b, g.into_iter().map(|v| -v).collect(), grads);
            }
            Op::Mul { a, b } => {
                let (a, b) = (*a, *b);
                let da = g.iter().zip(self.value(b).data()).map(|(g, y)| *g * *y).collect();
                let db = g.iter().zip(self.value(a).data()).map(|(g, x)| *g * *x).collect();
                send(a, da, grads);
                send(b, db, grads);
            }
            Op::Scale { x, factor } => {
                let (x, f) = (*x, *factor);
                send(x, g.into_iter().map(|v| v * f).collect(), grads);
            }
            Op::Expectation { x, scale } => {
                let xs = self.shape(*x);
                let (t, p) = (xs[1], xs[2] * xs[3]);
                let mut dx = vec![F::zero(); t * p];
                for k in 0..t {
                    let kf = F::from_usize(k).expect("bin index") * *scale;
                    for px in 0..p {
                        dx[k * p + px] = kf * g[px];
                    }
                }
                let x = *x;
                send(x, dx, grads);
            }
            Op::Diff { x, axis } => {
                let x = *x;
                let xs = self.shape(x);
                let (h, w) = (xs[0], xs[1]);
                let mut dx = vec![F::zero(); h * w];
                if *axis <= 1 {
                    let (oh, ow, step) = if *axis == 0 { (h - 1, w, w) } else { (h, w - 1, 1) };
                    for i in 0..oh {
                        for j in 0..ow {
                            let src = i * w + j;
                            let gv = g[i * ow + j];
                            dx[src + step] = dx[src + step] + gv;
                            dx[src] = dx[src] - gv;
                        }
                    }
                }
                send(x, dx, grads);
            }
        }
    }
}
