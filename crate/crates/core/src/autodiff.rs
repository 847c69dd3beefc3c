//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation in execution order, so node inputs
//! always precede the node. [`Graph::backward`] walks the tape once in
//! reverse, then clears it.

use std::collections::HashMap;
use std::rc::Rc;

use crate::error::{Error, Result};
use crate::kernels::{self as k, f, sum_f64};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dims4, lit, Real, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Sigmoid,
    /// tanh approximation of the Gaussian error linear unit.
    Gelu,
    /// `sqrt(v + eps^2)`.
    SqrtEps(f64),
    Abs,
    Square,
    /// Natural log, input clamped below at 1e-30.
    Ln,
}

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Sigmoid => sigmoid(x),
            Unary::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * x * (1.0 + t)
            }
            Unary::SqrtEps(eps) => (x + eps * eps).sqrt(),
            Unary::Abs => x.abs(),
            Unary::Square => x * x,
            Unary::Ln => x.max(1e-30).ln(),
        }
    }

    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Sigmoid => y * (1.0 - y),
            Unary::Gelu => {
                let t = (GELU_C * (x + 0.044715 * x * x * x)).tanh();
                0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
            }
            Unary::SqrtEps(_) => 0.5 / y,
            Unary::Abs => x.signum() * (x != 0.0) as i32 as f64,
            Unary::Square => 2.0 * x,
            Unary::Ln => {
                if x > 1e-30 {
                    1.0 / x
                } else {
                    0.0
                }
            }
        }
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Debug)]
enum Op {
    Input,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddBcast(Var, Var),
    MulBcast(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    AddChannel(Var, Var),
    MulChannel(Var, Var),
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    ConvPointwise { x: Var, w: Var, bias: Option<Var> },
    Conv3x3 { x: Var, w: Var, bias: Option<Var>, stride: usize },
    DwConv3 { x: Var, w: Var },
    Softmax { x: Var, axis: usize },
    LayerNormC { x: Var, gamma: Var, beta: Var },
    L2NormLast(Var),
    Fft2(Var),
    Index0(Var, usize),
    PixelUnshuffle(Var, usize),
    PixelShuffle(Var, usize),
    Reshape(Var),
    TransposeLast2(Var),
    ConcatC(Vec<Var>),
    Sum(Var),
    Mean(Var),
    SumPerChannel(Var),
    StdPop(Var),
    GatherPixels(Var, Rc<Vec<usize>>),
    ScatterPixels(Var, Rc<Vec<usize>>),
    GlobalAvgPool(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by one backward pass.
#[derive(Debug, Default)]
pub struct Gradients<T = f32> {
    inputs: HashMap<usize, Vec<T>>,
    params: Vec<(ParamId, Vec<T>)>,
}

impl<T: Real> Gradients<T> {
    /// Gradient with respect to an input created by [`Graph::input`].
    pub fn wrt(&self, v: Var) -> Option<&[T]> {
        self.inputs.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> &[(ParamId, Vec<T>)] {
        &self.params
    }

    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g.as_slice())
    }

    /// Adds every parameter gradient into the store's gradient buffers.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) {
        for (id, g) in &self.params {
            store.accumulate_grad(*id, g);
        }
    }
}

/// The tape.
pub struct Graph<T = f32> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    grad_enabled: bool,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn same_shape(what: &str, a: &[usize], b: &[usize]) -> Result<()> {
    if a == b {
        Ok(())
    } else {
        Err(Error::Shape(format!("{what}: {a:?} vs {b:?}")))
    }
}

/// Gradients shrink geometrically through deep stacks of small weights and
/// reach the subnormal range in f32, where arithmetic is an order of
/// magnitude slower; they are cut to zero instead.
fn flush_subnormal<T: Real>(v: &mut [T]) {
    let tiny = T::min_positive_value();
    for x in v {
        if x.abs() < tiny {
            *x = T::zero();
        }
    }
}

fn map2<T: Real>(a: &[T], b: &[T], op: impl Fn(T, T) -> T) -> Vec<T> {
    a.iter().zip(b).map(|(&x, &y)| op(x, y)).collect()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), params: HashMap::new(), grad_enabled: true }
    }

    /// A graph that records values but never requires gradients.
    pub fn inference() -> Self {
        Self { grad_enabled: false, ..Self::new() }
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

    pub fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, mut value: Tensor<T>, op: Op, needs_grad: bool) -> Var {
        let needs_grad = needs_grad && self.grad_enabled;
        value.requires_grad = needs_grad;
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    fn out(&mut self, shape: &[usize], data: Vec<T>, op: Op) -> Var {
        let ng = self.ng(&op_inputs(&op));
        self.push(Tensor::new(shape, data).expect("kernel output matches shape"), op, ng)
    }

    // ------------------------------------------------------------ leaves

    /// Records a leaf value. With `requires_grad`, backward reports its gradient.
    pub fn input(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.push(t, Op::Input, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.input(t, false)
    }

    /// Records a parameter; repeated calls within one tape return the same node.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let t = store.tensor(id);
        let value = Tensor::new(t.shape(), t.data().to_vec()).expect("valid parameter");
        let v = self.push(value, Op::Param(id), true);
        self.params.insert(id, v);
        v
    }

    // ------------------------------------------------------------ elementwise

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("add", self.shape(a), self.shape(b))?;
        let data = map2(self.data(a), self.data(b), |x, y| x + y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, data, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("sub", self.shape(a), self.shape(b))?;
        let data = map2(self.data(a), self.data(b), |x, y| x - y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, data, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("mul", self.shape(a), self.shape(b))?;
        let data = map2(self.data(a), self.data(b), |x, y| x * y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, data, Op::Mul(a, b)))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        same_shape("div", self.shape(a), self.shape(b))?;
        let data = map2(self.data(a), self.data(b), |x, y| x / y);
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, data, Op::Div(a, b)))
    }

    fn check_bcast(&self, what: &str, a: Var, b: Var) -> Result<Vec<usize>> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() || sa.iter().zip(sb).any(|(&x, &y)| y != x && y != 1) {
            return Err(Error::Shape(format!("{what}: cannot broadcast {sb:?} onto {sa:?}")));
        }
        Ok(k::broadcast_index_map(sa, sb))
    }

    /// `a + b` where `b` has the rank of `a` and size 1 on broadcast axes.
    pub fn add_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.check_bcast("add_bcast", a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = da.iter().zip(&map).map(|(&x, &i)| x + db[i]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, data, Op::AddBcast(a, b)))
    }

    /// `a * b` where `b` has the rank of `a` and size 1 on broadcast axes.
    pub fn mul_bcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = self.check_bcast("mul_bcast", a, b)?;
        let (da, db) = (self.data(a), self.data(b));
        let data = da.iter().zip(&map).map(|(&x, &i)| x * db[i]).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.out(&shape, data, Op::MulBcast(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let sc = lit::<T>(s);
        let data = self.data(a).iter().map(|&x| x * sc).collect();
        let shape = self.shape(a).to_vec();
        self.out(&shape, data, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let sc = lit::<T>(s);
        let data = self.data(a).iter().map(|&x| x + sc).collect();
        let shape = self.shape(a).to_vec();
        self.out(&shape, data, Op::AddScalar(a))
    }

    pub fn unary(&mut self, a: Var, kind: Unary) -> Var {
        let data = self.data(a).iter().map(|&x| lit(kind.apply(f(x)))).collect();
        let shape = self.shape(a).to_vec();
        self.out(&shape, data, Op::Unary(a, kind))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Gelu)
    }

    pub fn sqrt_eps(&mut self, a: Var, eps: f64) -> Var {
        self.unary(a, Unary::SqrtEps(eps))
    }

    fn channel_layout(&self, x: Var, p: Var, what: &str) -> Result<(usize, usize, usize)> {
        let s = self.shape(x);
        let ps = self.shape(p);
        if s.len() < 2 || ps.len() != 1 || ps[0] != s[1] {
            return Err(Error::Shape(format!("{what}: {ps:?} does not match axis 1 of {s:?}")));
        }
        Ok((s[0], s[1], s[2..].iter().product()))
    }

    /// Adds a per-channel vector `[C]` along axis 1.
    pub fn add_channel(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (b, c, inner) = self.channel_layout(x, bias, "add_channel")?;
        let mut data = self.data(x).to_vec();
        let bv = self.data(bias);
        for (i, chunk) in data.chunks_mut(inner).enumerate().take(b * c) {
            let v = bv[i % c];
            chunk.iter_mut().for_each(|e| *e = *e + v);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.out(&shape, data, Op::AddChannel(x, bias)))
    }

    /// Multiplies by a per-channel vector `[C]` along axis 1.
    pub fn mul_channel(&mut self, x: Var, scale: Var) -> Result<Var> {
        let (b, c, inner) = self.channel_layout(x, scale, "mul_channel")?;
        let mut data = self.data(x).to_vec();
        let sv = self.data(scale);
        for (i, chunk) in data.chunks_mut(inner).enumerate().take(b * c) {
            let v = sv[i % c];
            chunk.iter_mut().for_each(|e| *e = *e * v);
        }
        let shape = self.shape(x).to_vec();
        Ok(self.out(&shape, data, Op::MulChannel(x, scale)))
    }

    // ------------------------------------------------------------ linear algebra

    fn matmul_dims(&self, a: Var, b: Var, ta: bool, tb: bool) -> Result<MatDims> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::Shape(format!("matmul needs rank >= 2: {sa:?} x {sb:?}")));
        }
        let (ra, ca) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (rb, cb) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (m, ka) = if ta { (ca, ra) } else { (ra, ca) };
        let (kb, n) = if tb { (cb, rb) } else { (rb, cb) };
        let ba: usize = sa[..sa.len() - 2].iter().product();
        let bb: usize = sb[..sb.len() - 2].iter().product();
        if ka != kb || (ba != bb && ba != 1 && bb != 1) {
            return Err(Error::Shape(format!("matmul shape mismatch: {sa:?} x {sb:?}")));
        }
        let lead = if ba >= bb { &sa[..sa.len() - 2] } else { &sb[..sb.len() - 2] };
        let mut out_shape = lead.to_vec();
        out_shape.extend([m, n]);
        Ok(MatDims { m, k: ka, n, ba, bb, batch: ba.max(bb), out_shape })
    }

    /// Batched matrix product over the last two axes; a batch of one broadcasts.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, b, false, false)
    }

    /// Batched `op(a) * op(b)` where `ta`/`tb` transpose the last two axes.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let d = self.matmul_dims(a, b, ta, tb)?;
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); d.batch * d.m * d.n];
        for i in 0..d.batch {
            let ai = if d.ba == 1 { 0 } else { i };
            let bi = if d.bb == 1 { 0 } else { i };
            k_gemm(&d, &da[ai * d.m * d.k..], ta, &db[bi * d.k * d.n..], tb, &mut out[i * d.m * d.n..]);
        }
        let shape = d.out_shape.clone();
        Ok(self.out(&shape, out, Op::MatMul { a, b, ta, tb }))
    }

    // ------------------------------------------------------------ convolutions

    /// 1x1 convolution: `w` is `[C_out, C_in]`, optional `bias` is `[C_out]`.
    pub fn conv_pointwise(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (b, cin, h, wd) = dims4(self.shape(x))?;
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != cin {
            return Err(Error::Shape(format!("conv_pointwise: weight {ws:?} for input {:?}", self.shape(x))));
        }
        let cout = ws[0];
        check_bias(self, bias, cout)?;
        let y = k::conv_pointwise_fwd(self.data(x), self.data(w), bias.map(|v| self.data(v)), b, cin, cout, h * wd);
        Ok(self.out(&[b, cout, h, wd], y, Op::ConvPointwise { x, w, bias }))
    }

    /// Dense 3x3 convolution with zero padding 1; `w` is `[C_out, C_in, 3, 3]`.
    pub fn conv3x3(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize) -> Result<Var> {
        let (b, cin, h, wd) = dims4(self.shape(x))?;
        let ws = self.shape(w);
        if ws.len() != 4 || ws[1] != cin || ws[2] != 3 || ws[3] != 3 || stride == 0 {
            return Err(Error::Shape(format!("conv3x3: weight {ws:?} for input {:?}", self.shape(x))));
        }
        let cout = ws[0];
        check_bias(self, bias, cout)?;
        let y = k::conv3x3_fwd(self.data(x), self.data(w), bias.map(|v| self.data(v)), b, cin, cout, h, wd, stride);
        let shape = [b, cout, k::conv_out_dim(h, stride), k::conv_out_dim(wd, stride)];
        Ok(self.out(&shape, y, Op::Conv3x3 { x, w, bias, stride }))
    }

    /// Per-channel 3x3 convolution, zero padding 1, stride 1; `w` is `[C, 3, 3]`.
    pub fn conv_depthwise3x3(&mut self, x: Var, w: Var) -> Result<Var> {
        let (b, c, h, wd) = dims4(self.shape(x))?;
        if self.shape(w) != [c, 3, 3] {
            return Err(Error::Shape(format!("depthwise: weight {:?} for {c} channels", self.shape(w))));
        }
        let y = k::dwconv3_fwd(self.data(x), self.data(w), b * c, c, h, wd);
        Ok(self.out(&[b, c, h, wd], y, Op::DwConv3 { x, w }))
    }

    // ------------------------------------------------------------ normalization

    pub fn softmax_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if axis >= s.len() {
            return Err(Error::Shape(format!("softmax axis {axis} out of range for {s:?}")));
        }
        let (outer, n, inner) = split_axis(&s, axis);
        let y = k::softmax_fwd(self.data(x), outer, n, inner);
        Ok(self.out(&s, y, Op::Softmax { x, axis }))
    }

    /// Normalizes each pixel over channels, then applies per-channel affine.
    pub fn layernorm_channel(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x))?;
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::Shape(format!("layernorm: affine params must be [{c}]")));
        }
        let y = k::layernorm_fwd(self.data(x), self.data(gamma), self.data(beta), b, c, h * w);
        Ok(self.out(&[b, c, h, w], y, Op::LayerNormC { x, gamma, beta }))
    }

    /// Scales every vector along the last axis to unit L2 norm.
    pub fn l2_normalize_last(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let y = k::l2norm_fwd(self.data(x), *s.last().unwrap());
        self.out(&s, y, Op::L2NormLast(x))
    }

    // ------------------------------------------------------------ frequency domain

    /// 2-D DFT of every `[H, W]` plane; returns `(re, im)`.
    pub fn fft2(&mut self, x: Var) -> Result<(Var, Var)> {
        let stacked = self.fft2_stacked(x)?;
        Ok((self.index0(stacked, 0)?, self.index0(stacked, 1)?))
    }

    /// 2-D DFT with real and imaginary parts stacked on a new leading axis of size 2.
    pub fn fft2_stacked(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x))?;
        if !crate::fft::is_pow2(h) || !crate::fft::is_pow2(w) {
            return Err(Error::Shape(format!("fft2 needs power-of-two spatial dims, got {h}x{w}")));
        }
        let y = k::fft2_fwd(self.data(x), b * c, h, w);
        Ok(self.out(&[2, b, c, h, w], y, Op::Fft2(x)))
    }

    /// Selects entry `i` of the leading axis.
    pub fn index0(&mut self, x: Var, i: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 || i >= s[0] {
            return Err(Error::Shape(format!("index0({i}) on {s:?}")));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.data(x)[i * inner..(i + 1) * inner].to_vec();
        Ok(self.out(&s[1..], data, Op::Index0(x, i)))
    }

    // ------------------------------------------------------------ layout

    pub fn pixel_unshuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x))?;
        if r == 0 || h % r != 0 || w % r != 0 {
            return Err(Error::Shape(format!("pixel_unshuffle: {h}x{w} not divisible by {r}")));
        }
        let y = k::unshuffle(self.data(x), b, c, h, w, r);
        Ok(self.out(&[b, c * r * r, h / r, w / r], y, Op::PixelUnshuffle(x, r)))
    }

    pub fn pixel_shuffle(&mut self, x: Var, r: usize) -> Result<Var> {
        let (b, cr, h, w) = dims4(self.shape(x))?;
        if r == 0 || cr % (r * r) != 0 {
            return Err(Error::Shape(format!("pixel_shuffle: {cr} channels not divisible by {}", r * r)));
        }
        let c = cr / (r * r);
        let y = k::shuffle(self.data(x), b, c, h * r, w * r, r);
        Ok(self.out(&[b, c, h * r, w * r], y, Op::PixelShuffle(x, r)))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(x).numel() {
            return Err(Error::Shape(format!("cannot reshape {:?} to {shape:?}", self.shape(x))));
        }
        let data = self.data(x).to_vec();
        Ok(self.out(shape, data, Op::Reshape(x)))
    }

    pub fn transpose_last2(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("transpose needs rank >= 2, got {s:?}")));
        }
        let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
        let batch = s[..s.len() - 2].iter().product();
        let y = k::transpose_last2(self.data(x), batch, m, n);
        let mut shape = s.clone();
        let r = shape.len();
        shape.swap(r - 1, r - 2);
        Ok(self.out(&shape, y, Op::TransposeLast2(x)))
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(*xs.first().ok_or_else(|| Error::Shape("empty concat".into()))?).to_vec();
        if first.len() < 2 {
            return Err(Error::Shape(format!("concat needs rank >= 2, got {first:?}")));
        }
        let b = first[0];
        let inner: usize = first[2..].iter().product();
        let mut total = 0;
        for &v in xs {
            let s = self.shape(v);
            if s.len() != first.len() || s[0] != b || s[2..] != first[2..] {
                return Err(Error::Shape(format!("concat: {s:?} vs {first:?}")));
            }
            total += s[1];
        }
        let mut data = Vec::with_capacity(b * total * inner);
        for bi in 0..b {
            for &v in xs {
                let c = self.shape(v)[1];
                data.extend_from_slice(&self.data(v)[bi * c * inner..(bi + 1) * c * inner]);
            }
        }
        let mut shape = first;
        shape[1] = total;
        Ok(self.out(&shape, data, Op::ConcatC(xs.to_vec())))
    }

    // ------------------------------------------------------------ reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = lit(sum_f64(self.data(x)));
        self.out(&[1], vec![s], Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel() as f64;
        let s = lit(sum_f64(self.data(x)) / n);
        self.out(&[1], vec![s], Op::Mean(x))
    }

    /// Sums `[B, C, ...]` over every axis except 1, giving `[C]`.
    pub fn sum_per_channel(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() < 2 {
            return Err(Error::Shape(format!("sum_per_channel on {s:?}")));
        }
        let y = k::channel_sums(self.data(x), s[0], s[1], s[2..].iter().product());
        Ok(self.out(&[s[1]], y, Op::SumPerChannel(x)))
    }

    /// Population standard deviation of all entries.
    pub fn std_pop(&mut self, x: Var) -> Var {
        let d = self.data(x);
        let n = d.len() as f64;
        let mu = sum_f64(d) / n;
        let var = d.iter().map(|&v| (f(v) - mu).powi(2)).sum::<f64>() / n;
        self.out(&[1], vec![lit(var.sqrt())], Op::StdPop(x))
    }

    /// `[B, C, H, W] -> [B, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x))?;
        let hw = h * w;
        let y = self.data(x).chunks(hw).map(|p| lit(sum_f64(p) / hw as f64)).collect();
        Ok(self.out(&[b, c], y, Op::GlobalAvgPool(x)))
    }

    // ------------------------------------------------------------ sparse routing

    /// Collects pixel columns: `idx` holds flat `b * H * W + p` positions,
    /// output is `[C, idx.len()]`.
    pub fn gather_pixels(&mut self, x: Var, idx: Rc<Vec<usize>>) -> Result<Var> {
        let (b, c, h, w) = dims4(self.shape(x))?;
        let hw = h * w;
        if idx.iter().any(|&i| i >= b * hw) {
            return Err(Error::InvalidArgument("gather index out of range".into()));
        }
        let m = idx.len();
        let d = self.data(x);
        let mut y = vec![T::zero(); c * m];
        for (j, &i) in idx.iter().enumerate() {
            let (bi, p) = (i / hw, i % hw);
            for ci in 0..c {
                y[ci * m + j] = d[(bi * c + ci) * hw + p];
            }
        }
        Ok(self.out(&[c, m.max(1)], if m == 0 { vec![T::zero(); c] } else { y }, Op::GatherPixels(x, idx)))
    }

    /// Inverse placement of [`Graph::gather_pixels`]: scatters `[C, M]` columns
    /// into a zero `[B, C, H, W]` map, summing duplicates.
    pub fn scatter_pixels(&mut self, x: Var, idx: Rc<Vec<usize>>, shape: [usize; 4]) -> Result<Var> {
        let [b, c, h, w] = shape;
        let hw = h * w;
        let s = self.shape(x);
        if s.len() != 2 || s[0] != c || (s[1] != idx.len() && !idx.is_empty()) {
            return Err(Error::Shape(format!("scatter: {s:?} for {} indices into {shape:?}", idx.len())));
        }
        if idx.iter().any(|&i| i >= b * hw) {
            return Err(Error::InvalidArgument("scatter index out of range".into()));
        }
        let m = idx.len();
        let d = self.data(x);
        let mut y = vec![T::zero(); b * c * hw];
        for (j, &i) in idx.iter().enumerate() {
            let (bi, p) = (i / hw, i % hw);
            for ci in 0..c {
                let o = &mut y[(bi * c + ci) * hw + p];
                *o = *o + d[ci * m + j];
            }
        }
        Ok(self.out(&shape, y, Op::ScatterPixels(x, idx)))
    }

    // ------------------------------------------------------------ backward

    /// Accumulates d(loss)/d(leaf) for every leaf that requires a gradient,
    /// then clears the tape.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Shape(format!("backward needs a scalar loss, got {:?}", self.shape(loss))));
        }
        if self.nodes.is_empty() {
            return Err(Error::InvalidArgument("backward on an empty tape".into()));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            if !self.nodes[i].needs_grad {
                continue;
            }
            match &self.nodes[i].op {
                Op::Input => {
                    out.inputs.insert(i, g);
                }
                Op::Param(id) => out.params.push((*id, g)),
                op => {
                    for (v, mut dv) in self.vjp(i, op, &g) {
                        flush_subnormal(&mut dv);
                        if !self.nodes[v.0].needs_grad {
                            continue;
                        }
                        match &mut grads[v.0] {
                            Some(acc) => acc.iter_mut().zip(&dv).for_each(|(a, &b)| *a = *a + b),
                            slot => *slot = Some(dv),
                        }
                    }
                }
            }
        }
        out.params.sort_by_key(|(id, _)| *id);
        self.nodes.clear();
        self.params.clear();
        Ok(out)
    }

    /// Vector-Jacobian products of node `i` for upstream gradient `g`.
    fn vjp(&self, i: usize, op: &Op, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let val = |v: Var| self.data(v);
        let ng = |v: Var| self.nodes[v.0].needs_grad;
        let y = self.nodes[i].value.data();
        match *op {
            Op::Input | Op::Param(_) => vec![],
            Op::Add(a, b) => vec![(a, g.to_vec()), (b, g.to_vec())],
            Op::Sub(a, b) => vec![(a, g.to_vec()), (b, g.iter().map(|&v| -v).collect())],
            Op::Mul(a, b) => {
                let mut r = vec![];
                if ng(a) {
                    r.push((a, map2(g, val(b), |x, y| x * y)));
                }
                if ng(b) {
                    r.push((b, map2(g, val(a), |x, y| x * y)));
                }
                r
            }
            Op::Div(a, b) => {
                let mut r = vec![];
                if ng(a) {
                    r.push((a, map2(g, val(b), |x, y| x / y)));
                }
                if ng(b) {
                    let db = g.iter().zip(y).zip(val(b)).map(|((&gv, &yv), &bv)| -gv * yv / bv).collect();
                    r.push((b, db));
                }
                r
            }
            Op::AddBcast(a, b) | Op::MulBcast(a, b) => {
                let is_mul = matches!(op, Op::MulBcast(..));
                let map = k::broadcast_index_map(self.shape(a), self.shape(b));
                let mut r = vec![];
                if ng(a) {
                    let da = if is_mul {
                        let bv = val(b);
                        g.iter().zip(&map).map(|(&gv, &j)| gv * bv[j]).collect()
                    } else {
                        g.to_vec()
                    };
                    r.push((a, da));
                }
                if ng(b) {
                    let mut db = vec![0.0f64; self.value(b).numel()];
                    let av = val(a);
                    for (idx, (&gv, &j)) in g.iter().zip(&map).enumerate() {
                        db[j] += if is_mul { f(gv * av[idx]) } else { f(gv) };
                    }
                    r.push((b, db.into_iter().map(lit).collect()));
                }
                r
            }
            Op::Scale(a, s) => {
                let sc = lit::<T>(s);
                vec![(a, g.iter().map(|&v| v * sc).collect())]
            }
            Op::AddScalar(a) => vec![(a, g.to_vec())],
            Op::Unary(a, kind) => {
                let d = g.iter().zip(val(a)).zip(y).map(|((&gv, &x), &yv)| gv * lit(kind.derivative(f(x), f(yv))));
                vec![(a, d.collect())]
            }
            Op::AddChannel(x, bias) => {
                let s = self.shape(x);
                let mut r = vec![(x, g.to_vec())];
                if ng(bias) {
                    r.push((bias, k::channel_sums(g, s[0], s[1], s[2..].iter().product())));
                }
                r
            }
            Op::MulChannel(x, sc) => {
                let s = self.shape(x);
                let (b, c, inner) = (s[0], s[1], s[2..].iter().product::<usize>());
                let sv = val(sc);
                let xv = val(x);
                let mut r = vec![];
                if ng(x) {
                    let mut dx = g.to_vec();
                    for (j, chunk) in dx.chunks_mut(inner).enumerate() {
                        let v = sv[j % c];
                        chunk.iter_mut().for_each(|e| *e = *e * v);
                    }
                    r.push((x, dx));
                }
                if ng(sc) {
                    let mut ds = vec![0.0f64; c];
                    for j in 0..b * c {
                        let off = j * inner;
                        ds[j % c] += (0..inner).map(|t| f(g[off + t] * xv[off + t])).sum::<f64>();
                    }
                    r.push((sc, ds.into_iter().map(lit).collect()));
                }
                r
            }
            Op::MatMul { a, b, ta, tb } => {
                let d = self.matmul_dims(a, b, ta, tb).expect("recorded shapes are valid");
                let (av, bv) = (val(a), val(b));
                let mut r = vec![];
                if ng(a) {
                    let mut da = vec![T::zero(); av.len()];
                    for bi in 0..d.batch {
                        let ai = if d.ba == 1 { 0 } else { bi };
                        let bj = if d.bb == 1 { 0 } else { bi };
                        let gs = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let bs = &bv[bj * d.k * d.n..(bj + 1) * d.k * d.n];
                        let das = &mut da[ai * d.m * d.k..(ai + 1) * d.m * d.k];
                        if ta {
                            crate::tensor::gemm(d.k, d.n, d.m, bs, tb, gs, true, das, true);
                        } else {
                            crate::tensor::gemm(d.m, d.n, d.k, gs, false, bs, !tb, das, true);
                        }
                    }
                    r.push((a, da));
                }
                if ng(b) {
                    let mut db = vec![T::zero(); bv.len()];
                    for bi in 0..d.batch {
                        let ai = if d.ba == 1 { 0 } else { bi };
                        let bj = if d.bb == 1 { 0 } else { bi };
                        let gs = &g[bi * d.m * d.n..(bi + 1) * d.m * d.n];
                        let as_ = &av[ai * d.m * d.k..(ai + 1) * d.m * d.k];
                        let dbs = &mut db[bj * d.k * d.n..(bj + 1) * d.k * d.n];
                        if tb {
                            crate::tensor::gemm(d.n, d.m, d.k, gs, true, as_, ta, dbs, true);
                        } else {
                            crate::tensor::gemm(d.k, d.m, d.n, as_, !ta, gs, false, dbs, true);
                        }
                    }
                    r.push((b, db));
                }
                r
            }
            Op::ConvPointwise { x, w, bias } => {
                let (b, cin, h, wd) = dims4(self.shape(x)).unwrap();
                let cout = self.shape(w)[0];
                let (dx, dw, db) = k::conv_pointwise_bwd(val(x), val(w), g, b, cin, cout, h * wd, ng(x));
                let mut r = vec![(w, dw)];
                if let Some(dx) = dx {
                    r.push((x, dx));
                }
                if let Some(bias) = bias {
                    r.push((bias, db));
                }
                r
            }
            Op::Conv3x3 { x, w, bias, stride } => {
                let (b, cin, h, wd) = dims4(self.shape(x)).unwrap();
                let cout = self.shape(w)[0];
                let (dx, dw, db) = k::conv3x3_bwd(val(x), val(w), g, b, cin, cout, h, wd, stride, ng(x));
                let mut r = vec![(w, dw)];
                if let Some(dx) = dx {
                    r.push((x, dx));
                }
                if let Some(bias) = bias {
                    r.push((bias, db));
                }
                r
            }
            Op::DwConv3 { x, w } => {
                let (b, c, h, wd) = dims4(self.shape(x)).unwrap();
                let (dx, dw) = k::dwconv3_bwd(val(x), val(w), g, b * c, c, h, wd, ng(x));
                let mut r = vec![(w, dw)];
                if let Some(dx) = dx {
                    r.push((x, dx));
                }
                r
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = split_axis(self.shape(x), axis);
                vec![(x, k::softmax_bwd(y, g, outer, n, inner))]
            }
            Op::LayerNormC { x, gamma, beta } => {
                let (b, c, h, w) = dims4(self.shape(x)).unwrap();
                let (dx, dg, db) = k::layernorm_bwd(val(x), val(gamma), g, b, c, h * w);
                vec![(x, dx), (gamma, dg), (beta, db)]
            }
            Op::L2NormLast(x) => {
                let len = *self.shape(x).last().unwrap();
                vec![(x, k::l2norm_bwd(val(x), g, len))]
            }
            Op::Fft2(x) => {
                let (b, c, h, w) = dims4(self.shape(x)).unwrap();
                vec![(x, k::fft2_bwd(g, b * c, h, w))]
            }
            Op::Index0(x, idx) => {
                let mut dx = vec![T::zero(); self.value(x).numel()];
                dx[idx * g.len()..(idx + 1) * g.len()].copy_from_slice(g);
                vec![(x, dx)]
            }
            Op::PixelUnshuffle(x, r) => {
                let (b, c, h, w) = dims4(self.shape(x)).unwrap();
                vec![(x, k::shuffle(g, b, c, h, w, r))]
            }
            Op::PixelShuffle(x, r) => {
                let (b, c, h, w) = dims4(self.nodes[i].value.shape()).unwrap();
                vec![(x, k::unshuffle(g, b, c, h, w, r))]
            }
            Op::Reshape(x) => vec![(x, g.to_vec())],
            Op::TransposeLast2(x) => {
                let s = self.shape(x);
                let (m, n) = (s[s.len() - 2], s[s.len() - 1]);
                let batch = s[..s.len() - 2].iter().product();
                vec![(x, k::transpose_last2(g, batch, n, m))]
            }
            Op::ConcatC(ref xs) => {
                let s = self.shape(xs[0]);
                let b = s[0];
                let inner: usize = s[2..].iter().product();
                let total: usize = xs.iter().map(|&v| self.shape(v)[1]).sum();
                let mut off = 0;
                let mut r = vec![];
                for &v in xs {
                    let c = self.shape(v)[1];
                    if ng(v) {
                        let mut dv = Vec::with_capacity(b * c * inner);
                        for bi in 0..b {
                            let start = (bi * total + off) * inner;
                            dv.extend_from_slice(&g[start..start + c * inner]);
                        }
                        r.push((v, dv));
                    }
                    off += c;
                }
                r
            }
            Op::Sum(x) => vec![(x, vec![g[0]; self.value(x).numel()])],
            Op::Mean(x) => {
                let n = self.value(x).numel();
                vec![(x, vec![g[0] / lit(n as f64); n])]
            }
            Op::SumPerChannel(x) => {
                let s = self.shape(x);
                let c = s[1];
                let inner: usize = s[2..].iter().product();
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (j, chunk) in dx.chunks_mut(inner).enumerate() {
                    chunk.fill(g[j % c]);
                }
                vec![(x, dx)]
            }
            Op::StdPop(x) => {
                let d = val(x);
                let n = d.len() as f64;
                let mu = sum_f64(d) / n;
                let sigma = f(y[0]);
                let gv = f(g[0]);
                let dx = d
                    .iter()
                    .map(|&v| if sigma > 0.0 { lit(gv * (f(v) - mu) / (n * sigma)) } else { T::zero() })
                    .collect();
                vec![(x, dx)]
            }
            Op::GlobalAvgPool(x) => {
                let (_, _, h, w) = dims4(self.shape(x)).unwrap();
                let hw = h * w;
                let scale = lit::<T>(1.0 / hw as f64);
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (j, chunk) in dx.chunks_mut(hw).enumerate() {
                    chunk.fill(g[j] * scale);
                }
                vec![(x, dx)]
            }
            Op::GatherPixels(x, ref idx) => {
                let (_, c, h, w) = dims4(self.shape(x)).unwrap();
                let hw = h * w;
                let m = idx.len();
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (j, &p) in idx.iter().enumerate() {
                    let (bi, p) = (p / hw, p % hw);
                    for ci in 0..c {
                        let o = &mut dx[(bi * c + ci) * hw + p];
                        *o = *o + g[ci * m + j];
                    }
                }
                vec![(x, dx)]
            }
            Op::ScatterPixels(x, ref idx) => {
                let (_, c, h, w) = dims4(self.nodes[i].value.shape()).unwrap();
                let hw = h * w;
                let m = idx.len();
                let mut dx = vec![T::zero(); self.value(x).numel()];
                for (j, &p) in idx.iter().enumerate() {
                    let (bi, p) = (p / hw, p % hw);
                    for ci in 0..c {
                        dx[ci * m + j] = g[(bi * c + ci) * hw + p];
                    }
                }
                vec![(x, dx)]
            }
        }
    }
}

struct MatDims {
    m: usize,
    k: usize,
    n: usize,
    ba: usize,
    bb: usize,
    batch: usize,
    out_shape: Vec<usize>,
}

fn k_gemm<T: Real>(d: &MatDims, a: &[T], ta: bool, b: &[T], tb: bool, c: &mut [T]) {
    crate::tensor::gemm(d.m, d.k, d.n, &a[..d.m * d.k], ta, &b[..d.k * d.n], tb, &mut c[..d.m * d.n], false);
}

fn check_bias<T: Real>(g: &Graph<T>, bias: Option<Var>, cout: usize) -> Result<()> {
    match bias {
        Some(b) if g.shape(b) != [cout] => {
            Err(Error::Shape(format!("bias {:?} for {cout} output channels", g.shape(b))))
        }
        _ => Ok(()),
    }
}

fn split_axis(s: &[usize], axis: usize) -> (usize, usize, usize) {
    (s[..axis].iter().product(), s[axis], s[axis + 1..].iter().product())
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Input | Op::Param(_) => vec![],
        Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddBcast(a, b)
        | Op::MulBcast(a, b)
        | Op::AddChannel(a, b)
        | Op::MulChannel(a, b)
        | Op::MatMul { a, b, .. }
        | Op::DwConv3 { x: a, w: b } => vec![*a, *b],
        Op::ConvPointwise { x, w, bias } | Op::Conv3x3 { x, w, bias, .. } => {
            let mut v = vec![*x, *w];
            v.extend(bias);
            v
        }
        Op::LayerNormC { x, gamma, beta } => vec![*x, *gamma, *beta],
        Op::ConcatC(xs) => xs.clone(),
        Op::Scale(x, _)
        | Op::AddScalar(x)
        | Op::Unary(x, _)
        | Op::Softmax { x, .. }
        | Op::L2NormLast(x)
        | Op::Fft2(x)
        | Op::Index0(x, _)
        | Op::PixelUnshuffle(x, _)
        | Op::PixelShuffle(x, _)
        | Op::Reshape(x)
        | Op::TransposeLast2(x)
        | Op::Sum(x)
        | Op::Mean(x)
        | Op::SumPerChannel(x)
        | Op::StdPop(x)
        | Op::GatherPixels(x, _)
        | Op::ScatterPixels(x, _)
        | Op::GlobalAvgPool(x) => vec![*x],
    }
}
