//! Wengert tape: records primitive operations during the forward pass and
//! replays them in reverse for gradients.
//!
//! The primitive set is fixed: matmul, 2-D convolution, elementwise
//! add/sub/mul/div, exp, log, tanh, relu, sigmoid, softmax (last axis),
//! sum/mean reductions, concat, slice, broadcast, reshape and gradient
//! reversal. Everything else (softplus, cross-entropy, KL terms, ...) is
//! composed from these.
//!
//! Every forward output is checked for finiteness: a NaN or infinity
//! panics with the producing op named rather than propagating silently.

use crate::tensor::Tensor;

/// Handle to a node on the tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ValueId(pub usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(ValueId, ValueId),
    Sub(ValueId, ValueId),
    Mul(ValueId, ValueId),
    Div(ValueId, ValueId),
    Exp(ValueId),
    Log(ValueId),
    Tanh(ValueId),
    Relu(ValueId),
    Sigmoid(ValueId),
    Softmax(ValueId),
    Sum(ValueId),
    Mean(ValueId),
    Matmul(ValueId, ValueId),
    Conv2d { input: ValueId, kernel: ValueId, stride: usize, pad: usize },
    Concat { parts: Vec<ValueId>, axis: usize },
    Slice { input: ValueId, axis: usize, start: usize },
    Broadcast(ValueId),
    Reshape(ValueId),
    GradReverse { input: ValueId, scale: f64 },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records a forward computation; `backward` fills per-node gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn assert_finite(op: &str, data: &[f64]) {
    for (i, v) in data.iter().enumerate() {
        assert!(
            v.is_finite(),
            "non-finite value {} at flat index {} produced by op `{}`",
            v,
            i,
            op
        );
    }
}

fn strides_of(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, needs_grad: bool) -> ValueId {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node { shape, data, op, needs_grad });
        ValueId(self.nodes.len() - 1)
    }

    fn node(&self, id: ValueId) -> &Node {
        &self.nodes[id.0]
    }

    pub fn shape(&self, id: ValueId) -> &[usize] {
        &self.node(id).shape
    }

    pub fn value(&self, id: ValueId) -> &[f64] {
        &self.node(id).data
    }

    pub fn item(&self, id: ValueId) -> f64 {
        let n = self.node(id);
        assert_eq!(n.data.len(), 1, "item() on node of shape {:?}", n.shape);
        n.data[0]
    }

    pub fn tensor(&self, id: ValueId) -> Tensor {
        let n = self.node(id);
        Tensor::new(n.shape.clone(), n.data.clone())
    }

    fn needs(&self, id: ValueId) -> bool {
        self.node(id).needs_grad
    }

    // ---- leaves ---------------------------------------------------------

    /// Inserts a tensor; participates in backward iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: &Tensor) -> ValueId {
        assert!(t.is_finite(), "leaf tensor contains non-finite values");
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, t.requires_grad())
    }

    /// Inserts a tensor as a differentiable input regardless of its flag.
    pub fn input(&mut self, t: &Tensor) -> ValueId {
        assert!(t.is_finite(), "input tensor contains non-finite values");
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, true)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> ValueId {
        assert_finite("constant", &data);
        self.push(shape, data, Op::Constant, false)
    }

    pub fn constant_from(&mut self, t: &Tensor) -> ValueId {
        self.constant(t.shape().to_vec(), t.data().to_vec())
    }

    pub fn scalar(&mut self, v: f64) -> ValueId {
        self.constant(vec![1], vec![v])
    }

    // ---- elementwise binary ---------------------------------------------

    fn binary(&mut self, a: ValueId, b: ValueId, name: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> ValueId {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!(na.shape, nb.shape, "{}: shape {:?} vs {:?}", name, na.shape, nb.shape);
        let data: Vec<f64> = na.data.iter().zip(&nb.data).map(|(x, y)| f(*x, *y)).collect();
        assert_finite(name, &data);
        let shape = na.shape.clone();
        let ng = na.needs_grad || nb.needs_grad;
        self.push(shape, data, op, ng)
    }

    pub fn add(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: ValueId, b: ValueId) -> ValueId {
        self.binary(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    // ---- elementwise unary ----------------------------------------------

    fn unary(&mut self, a: ValueId, name: &str, f: impl Fn(f64) -> f64, op: Op) -> ValueId {
        let na = self.node(a);
        let data: Vec<f64> = na.data.iter().map(|x| f(*x)).collect();
        assert_finite(name, &data);
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        self.push(shape, data, op, ng)
    }

    pub fn exp(&mut self, a: ValueId) -> ValueId {
        self.unary(a, "exp", f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: ValueId) -> ValueId {
        self.unary(a, "log", f64::ln, Op::Log(a))
    }

    pub fn tanh(&mut self, a: ValueId) -> ValueId {
        self.unary(a, "tanh", f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: ValueId) -> ValueId {
        self.unary(a, "relu", |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: ValueId) -> ValueId {
        self.unary(a, "sigmoid", sigmoid_stable, Op::Sigmoid(a))
    }

    /// Identity forward; backward multiplies the upstream gradient by `-scale`.
    pub fn grad_reverse(&mut self, a: ValueId, scale: f64) -> ValueId {
        let na = self.node(a);
        let (shape, data, ng) = (na.shape.clone(), na.data.clone(), na.needs_grad);
        self.push(shape, data, Op::GradReverse { input: a, scale }, ng)
    }

    // ---- softmax over the last axis --------------------------------------

    pub fn softmax(&mut self, a: ValueId) -> ValueId {
        let na = self.node(a);
        let last = *na.shape.last().expect("softmax on rank-0 tensor");
        assert!(last > 0);
        let mut data = na.data.clone();
        for row in data.chunks_mut(last) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        assert_finite("softmax", &data);
        let shape = na.shape.clone();
        let ng = na.needs_grad;
        self.push(shape, data, Op::Softmax(a), ng)
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&mut self, a: ValueId) -> ValueId {
        let total: f64 = self.node(a).data.iter().sum();
        assert_finite("sum", &[total]);
        let ng = self.needs(a);
        self.push(vec![1], vec![total], Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: ValueId) -> ValueId {
        let n = self.node(a).data.len().max(1);
        let total: f64 = self.node(a).data.iter().sum::<f64>() / n as f64;
        assert_finite("mean", &[total]);
        let ng = self.needs(a);
        self.push(vec![1], vec![total], Op::Mean(a), ng)
    }

    // ---- matmul -----------------------------------------------------------

    /// `[m, k] x [k, n] -> [m, n]`.
    pub fn matmul(&mut self, a: ValueId, b: ValueId) -> ValueId {
        let (na, nb) = (self.node(a), self.node(b));
        assert_eq!(na.shape.len(), 2, "matmul lhs must be 2-D, got {:?}", na.shape);
        assert_eq!(nb.shape.len(), 2, "matmul rhs must be 2-D, got {:?}", nb.shape);
        let (m, k) = (na.shape[0], na.shape[1]);
        let (k2, n) = (nb.shape[0], nb.shape[1]);
        assert_eq!(k, k2, "matmul inner dims {} vs {}", k, k2);
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let av = na.data[i * k + p];
                if av == 0.0 {
                    continue;
                }
                let brow = &nb.data[p * n..(p + 1) * n];
                let crow = &mut data[i * n..(i + 1) * n];
                for (c, bv) in crow.iter_mut().zip(brow) {
                    *c += av * bv;
                }
            }
        }
        assert_finite("matmul", &data);
        let ng = na.needs_grad || nb.needs_grad;
        self.push(vec![m, n], data, Op::Matmul(a, b), ng)
    }

    // ---- conv2d -----------------------------------------------------------

    /// `input [n, c_in, h, w]`, `kernel [c_out, c_in, kh, kw]`, zero padding.
    pub fn conv2d(&mut self, input: ValueId, kernel: ValueId, stride: usize, pad: usize) -> ValueId {
        assert!(stride >= 1, "conv2d stride must be >= 1");
        let (ni, nk) = (self.node(input), self.node(kernel));
        assert_eq!(ni.shape.len(), 4, "conv2d input must be 4-D, got {:?}", ni.shape);
        assert_eq!(nk.shape.len(), 4, "conv2d kernel must be 4-D, got {:?}", nk.shape);
        let (n, cin, h, w) = (ni.shape[0], ni.shape[1], ni.shape[2], ni.shape[3]);
        let (cout, cink, kh, kw) = (nk.shape[0], nk.shape[1], nk.shape[2], nk.shape[3]);
        assert_eq!(cin, cink, "conv2d channel mismatch {} vs {}", cin, cink);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than padded input");
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (w + 2 * pad - kw) / stride + 1;
        let mut data = vec![0.0; n * cout * oh * ow];
        for b in 0..n {
            for co in 0..cout {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = 0.0;
                        for ci in 0..cin {
                            for ky in 0..kh {
                                let iy = oy * stride + ky;
                                if iy < pad || iy - pad >= h {
                                    continue;
                                }
                                let iy = iy - pad;
                                for kx in 0..kw {
                                    let ix = ox * stride + kx;
                                    if ix < pad || ix - pad >= w {
                                        continue;
                                    }
                                    let ix = ix - pad;
                                    acc += ni.data[((b * cin + ci) * h + iy) * w + ix]
                                        * nk.data[((co * cin + ci) * kh + ky) * kw + kx];
                                }
                            }
                        }
                        data[((b * cout + co) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
        assert_finite("conv2d", &data);
        let ng = ni.needs_grad || nk.needs_grad;
        self.push(vec![n, cout, oh, ow], data, Op::Conv2d { input, kernel, stride, pad }, ng)
    }

    // ---- shape ops ----------------------------------------------------------

    /// Concatenates along `axis`; all parts must agree on the other axes.
    pub fn concat(&mut self, parts: &[ValueId], axis: usize) -> ValueId {
        assert!(!parts.is_empty(), "concat of zero parts");
        let first = self.node(parts[0]).shape.clone();
        assert!(axis < first.len(), "concat axis {} out of rank {}", axis, first.len());
        let mut axis_total = 0;
        for &p in parts {
            let s = &self.node(p).shape;
            assert_eq!(s.len(), first.len(), "concat rank mismatch");
            for (d, (&a, &b)) in s.iter().zip(&first).enumerate() {
                if d != axis {
                    assert_eq!(a, b, "concat shape mismatch on axis {}", d);
                }
            }
            axis_total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = axis_total;
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let np = self.node(p);
                let block = np.shape[axis] * inner;
                data.extend_from_slice(&np.data[o * block..(o + 1) * block]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        self.push(shape, data, Op::Concat { parts: parts.to_vec(), axis }, ng)
    }

    /// Takes `len` extents starting at `start` along `axis`.
    pub fn slice(&mut self, input: ValueId, axis: usize, start: usize, len: usize) -> ValueId {
        let ni = self.node(input);
        assert!(axis < ni.shape.len(), "slice axis {} out of rank {}", axis, ni.shape.len());
        assert!(
            start + len <= ni.shape[axis],
            "slice [{}, {}) exceeds extent {} on axis {}",
            start,
            start + len,
            ni.shape[axis],
            axis
        );
        let outer: usize = ni.shape[..axis].iter().product();
        let inner: usize = ni.shape[axis + 1..].iter().product();
        let full = ni.shape[axis] * inner;
        let mut shape = ni.shape.clone();
        shape[axis] = len;
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full + start * inner;
            data.extend_from_slice(&ni.data[base..base + len * inner]);
        }
        let ng = ni.needs_grad;
        self.push(shape, data, Op::Slice { input, axis, start }, ng)
    }

    /// Numpy-style broadcast (right-aligned; extents must match or be 1).
    pub fn broadcast(&mut self, input: ValueId, target: &[usize]) -> ValueId {
        let ni = self.node(input);
        let src = ni.shape.clone();
        assert!(src.len() <= target.len(), "broadcast cannot drop axes: {:?} -> {:?}", src, target);
        let offset = target.len() - src.len();
        for (j, &sd) in src.iter().enumerate() {
            let td = target[offset + j];
            assert!(sd == td || sd == 1, "broadcast {:?} -> {:?} invalid at axis {}", src, target, j);
        }
        let numel: usize = target.iter().product();
        let src_strides = strides_of(&src);
        // Stride 0 on broadcast axes maps every target index to its source element.
        let mut eff = vec![0usize; target.len()];
        for (j, &sd) in src.iter().enumerate() {
            eff[offset + j] = if sd == 1 && target[offset + j] != 1 { 0 } else { src_strides[j] };
        }
        let tstrides = strides_of(target);
        let mut data = vec![0.0; numel];
        for (t, v) in data.iter_mut().enumerate() {
            let mut rem = t;
            let mut s_off = 0;
            for d in 0..target.len() {
                let ix = rem / tstrides[d];
                rem %= tstrides[d];
                s_off += ix * eff[d];
            }
            *v = ni.data[s_off];
        }
        let ng = ni.needs_grad;
        self.push(target.to_vec(), data, Op::Broadcast(input), ng)
    }

    /// Row-major reinterpretation; element count must be preserved.
    pub fn reshape(&mut self, input: ValueId, shape: &[usize]) -> ValueId {
        let ni = self.node(input);
        assert_eq!(
            ni.data.len(),
            shape.iter().product::<usize>(),
            "reshape {:?} -> {:?} changes element count",
            ni.shape,
            shape
        );
        let (data, ng) = (ni.data.clone(), ni.needs_grad);
        self.push(shape.to_vec(), data, Op::Reshape(input), ng)
    }

    // ---- compositions -------------------------------------------------------

    pub fn neg(&mut self, a: ValueId) -> ValueId {
        self.scale(a, -1.0)
    }

    /// Multiplies by a constant scalar (constant + broadcast + mul).
    pub fn scale(&mut self, a: ValueId, c: f64) -> ValueId {
        let k = self.scalar(c);
        let k = self.broadcast(k, &self.shape(a).to_vec());
        self.mul(a, k)
    }

    /// Adds a constant scalar.
    pub fn add_scalar(&mut self, a: ValueId, c: f64) -> ValueId {
        let k = self.scalar(c);
        let k = self.broadcast(k, &self.shape(a).to_vec());
        self.add(a, k)
    }

    /// Numerically stable softplus: relu(x) + log(1 + exp(-|x|)).
    pub fn softplus(&mut self, a: ValueId) -> ValueId {
        let r = self.relu(a);
        let na = self.neg(a);
        let rn = self.relu(na);
        let abs = self.add(r, rn);
        let nabs = self.neg(abs);
        let e = self.exp(nabs);
        let e1 = self.add_scalar(e, 1.0);
        let l = self.log(e1);
        self.add(r, l)
    }

    /// Per-row sums of a 2-D tensor: `[n, d] -> [n, 1]` (matmul with ones).
    pub fn row_sum(&mut self, a: ValueId) -> ValueId {
        let s = self.shape(a).to_vec();
        assert_eq!(s.len(), 2, "row_sum expects 2-D input, got {:?}", s);
        let ones = self.constant(vec![s[1], 1], vec![1.0; s[1]]);
        self.matmul(a, ones)
    }

    // ---- backward -------------------------------------------------------------

    /// Reverse pass from a scalar root. May be called more than once per tape;
    /// each call starts from fresh gradients.
    pub fn backward(&mut self, root: ValueId) {
        assert_eq!(
            self.node(root).data.len(),
            1,
            "backward root must be scalar, got shape {:?}",
            self.node(root).shape
        );
        self.grads = vec![None; self.nodes.len()];
        if !self.node(root).needs_grad {
            return;
        }
        self.grads[root.0] = Some(vec![1.0]);
        for i in (0..=root.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let g = match self.grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
    }

    /// Gradient of a node after `backward`; `None` if it was not reached.
    pub fn grad(&self, id: ValueId) -> Option<&[f64]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    fn grad_buf(&mut self, id: ValueId) -> &mut [f64] {
        let numel = self.nodes[id.0].data.len();
        self.grads[id.0].get_or_insert_with(|| vec![0.0; numel]).as_mut_slice()
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.needs(a) {
                    for (d, gv) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(b) {
                    for (d, gv) in self.grad_buf(b).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
            Op::Sub(a, b) => {
                if self.needs(a) {
                    for (d, gv) in self.grad_buf(a).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
                if self.needs(b) {
                    for (d, gv) in self.grad_buf(b).iter_mut().zip(g) {
                        *d -= gv;
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    for ((d, gv), x) in self.grad_buf(a).iter_mut().zip(g).zip(&bv) {
                        *d += gv * x;
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    for ((d, gv), x) in self.grad_buf(b).iter_mut().zip(g).zip(&av) {
                        *d += gv * x;
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = self.nodes[b.0].data.clone();
                if self.needs(a) {
                    for ((d, gv), x) in self.grad_buf(a).iter_mut().zip(g).zip(&bv) {
                        *d += gv / x;
                    }
                }
                if self.needs(b) {
                    let out = self.nodes[i].data.clone();
                    for (((d, gv), x), o) in self.grad_buf(b).iter_mut().zip(g).zip(&bv).zip(&out) {
                        *d -= gv * o / x;
                    }
                }
            }
            Op::Exp(a) => {
                if self.needs(a) {
                    let out = self.nodes[i].data.clone();
                    for ((d, gv), o) in self.grad_buf(a).iter_mut().zip(g).zip(&out) {
                        *d += gv * o;
                    }
                }
            }
            Op::Log(a) => {
                if self.needs(a) {
                    let av = self.nodes[a.0].data.clone();
                    for ((d, gv), x) in self.grad_buf(a).iter_mut().zip(g).zip(&av) {
                        *d += gv / x;
                    }
                }
            }
            Op::Tanh(a) => {
                if self.needs(a) {
                    let out = self.nodes[i].data.clone();
                    for ((d, gv), o) in self.grad_buf(a).iter_mut().zip(g).zip(&out) {
                        *d += gv * (1.0 - o * o);
                    }
                }
            }
            Op::Relu(a) => {
                if self.needs(a) {
                    let av = self.nodes[a.0].data.clone();
                    for ((d, gv), x) in self.grad_buf(a).iter_mut().zip(g).zip(&av) {
                        if *x > 0.0 {
                            *d += gv;
                        }
                    }
                }
            }
            Op::Sigmoid(a) => {
                if self.needs(a) {
                    let out = self.nodes[i].data.clone();
                    for ((d, gv), o) in self.grad_buf(a).iter_mut().zip(g).zip(&out) {
                        *d += gv * o * (1.0 - o);
                    }
                }
            }
            Op::GradReverse { input, scale } => {
                if self.needs(input) {
                    for (d, gv) in self.grad_buf(input).iter_mut().zip(g) {
                        *d -= scale * gv;
                    }
                }
            }
            Op::Softmax(a) => {
                if self.needs(a) {
                    let out = self.nodes[i].data.clone();
                    let last = *self.nodes[i].shape.last().unwrap();
                    let buf = self.grad_buf(a);
                    for (row, (orow, grow)) in out.chunks(last).zip(g.chunks(last)).enumerate() {
                        let dot: f64 = orow.iter().zip(grow).map(|(o, gv)| o * gv).sum();
                        for (j, (o, gv)) in orow.iter().zip(grow).enumerate() {
                            buf[row * last + j] += o * (gv - dot);
                        }
                    }
                }
            }
            Op::Sum(a) => {
                if self.needs(a) {
                    let gv = g[0];
                    for d in self.grad_buf(a).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Mean(a) => {
                if self.needs(a) {
                    let n = self.nodes[a.0].data.len().max(1);
                    let gv = g[0] / n as f64;
                    for d in self.grad_buf(a).iter_mut() {
                        *d += gv;
                    }
                }
            }
            Op::Matmul(a, b) => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.needs(a) {
                    let bv = self.nodes[b.0].data.clone();
                    let da = self.grad_buf(a);
                    // dA = g . B^T
                    for i2 in 0..m {
                        for p in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i2 * n + j] * bv[p * n + j];
                            }
                            da[i2 * k + p] += acc;
                        }
                    }
                }
                if self.needs(b) {
                    let av = self.nodes[a.0].data.clone();
                    let db = self.grad_buf(b);
                    // dB = A^T . g
                    for p in 0..k {
                        for j in 0..n {
                            let mut acc = 0.0;
                            for i2 in 0..m {
                                acc += av[i2 * k + p] * g[i2 * n + j];
                            }
                            db[p * n + j] += acc;
                        }
                    }
                }
            }
            Op::Conv2d { input, kernel, stride, pad } => {
                let ishape = self.nodes[input.0].shape.clone();
                let kshape = self.nodes[kernel.0].shape.clone();
                let oshape = self.nodes[i].shape.clone();
                let (n, cin, h, w) = (ishape[0], ishape[1], ishape[2], ishape[3]);
                let (cout, _, kh, kw) = (kshape[0], kshape[1], kshape[2], kshape[3]);
                let (oh, ow) = (oshape[2], oshape[3]);
                let idata = self.nodes[input.0].data.clone();
                let kdata = self.nodes[kernel.0].data.clone();
                let needs_i = self.needs(input);
                let needs_k = self.needs(kernel);
                let mut di = if needs_i { vec![0.0; idata.len()] } else { Vec::new() };
                let mut dk = if needs_k { vec![0.0; kdata.len()] } else { Vec::new() };
                for b in 0..n {
                    for co in 0..cout {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                let gv = g[((b * cout + co) * oh + oy) * ow + ox];
                                if gv == 0.0 {
                                    continue;
                                }
                                for ci in 0..cin {
                                    for ky in 0..kh {
                                        let iy = oy * stride + ky;
                                        if iy < pad || iy - pad >= h {
                                            continue;
                                        }
                                        let iy = iy - pad;
                                        for kx in 0..kw {
                                            let ix = ox * stride + kx;
                                            if ix < pad || ix - pad >= w {
                                                continue;
                                            }
                                            let ix = ix - pad;
                                            let ii = ((b * cin + ci) * h + iy) * w + ix;
                                            let ki = ((co * cin + ci) * kh + ky) * kw + kx;
                                            if needs_i {
                                                di[ii] += gv * kdata[ki];
                                            }
                                            if needs_k {
                                                dk[ki] += gv * idata[ii];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
                if needs_i {
                    for (d, v) in self.grad_buf(input).iter_mut().zip(&di) {
                        *d += v;
                    }
                }
                if needs_k {
                    for (d, v) in self.grad_buf(kernel).iter_mut().zip(&dk) {
                        *d += v;
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let oshape = self.nodes[i].shape.clone();
                let outer: usize = oshape[..axis].iter().product();
                let inner: usize = oshape[axis + 1..].iter().product();
                let total_block = oshape[axis] * inner;
                let mut axis_off = 0;
                for &p in &parts {
                    let plen = self.nodes[p.0].shape[axis];
                    if self.needs(p) {
                        let block = plen * inner;
                        let dp = self.grad_buf(p);
                        for o in 0..outer {
                            let src = o * total_block + axis_off * inner;
                            for j in 0..block {
                                dp[o * block + j] += g[src + j];
                            }
                        }
                    }
                    axis_off += plen;
                }
            }
            Op::Slice { input, axis, start } => {
                if self.needs(input) {
                    let ishape = self.nodes[input.0].shape.clone();
                    let oshape = self.nodes[i].shape.clone();
                    let outer: usize = ishape[..axis].iter().product();
                    let inner: usize = ishape[axis + 1..].iter().product();
                    let full = ishape[axis] * inner;
                    let len = oshape[axis];
                    let di = self.grad_buf(input);
                    for o in 0..outer {
                        let base = o * full + start * inner;
                        for j in 0..len * inner {
                            di[base + j] += g[o * len * inner + j];
                        }
                    }
                }
            }
            Op::Broadcast(input) => {
                if self.needs(input) {
                    let src = self.nodes[input.0].shape.clone();
                    let target = self.nodes[i].shape.clone();
                    let offset = target.len() - src.len();
                    let src_strides = strides_of(&src);
                    let mut eff = vec![0usize; target.len()];
                    for (j, &sd) in src.iter().enumerate() {
                        eff[offset + j] =
                            if sd == 1 && target[offset + j] != 1 { 0 } else { src_strides[j] };
                    }
                    let tstrides = strides_of(&target);
                    let di = self.grad_buf(input);
                    for (t, gv) in g.iter().enumerate() {
                        let mut rem = t;
                        let mut s_off = 0;
                        for d in 0..target.len() {
                            let ix = rem / tstrides[d];
                            rem %= tstrides[d];
                            s_off += ix * eff[d];
                        }
                        di[s_off] += gv;
                    }
                }
            }
            Op::Reshape(input) => {
                if self.needs(input) {
                    for (d, gv) in self.grad_buf(input).iter_mut().zip(g) {
                        *d += gv;
                    }
                }
            }
        }
    }
}

fn sigmoid_stable(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn add_mul_backward() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&[2.0, 3.0]));
        let y = tape.input(&Tensor::vector(&[5.0, 7.0]));
        let p = tape.mul(x, y);
        let s = tape.sum(p);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[5.0, 7.0]);
        assert_eq!(tape.grad(y).unwrap(), &[2.0, 3.0]);
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, -1.0, 0.0, 1.0]);
        let s = tape.softmax(x);
        for row in tape.value(s).chunks(3) {
            let sum: f64 = row.iter().sum();
            assert!((sum - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn matmul_shapes_and_values() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let b = tape.constant(vec![3, 2], vec![7.0, 8.0, 9.0, 10.0, 11.0, 12.0]);
        let c = tape.matmul(a, b);
        assert_eq!(tape.shape(c), &[2, 2]);
        assert_eq!(tape.value(c), &[58.0, 64.0, 139.0, 154.0]);
    }

    #[test]
    fn grad_reverse_negates() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&[1.0, -2.0]));
        let r = tape.grad_reverse(x, 2.0);
        let s = tape.sum(r);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[-2.0, -2.0]);
        assert_eq!(tape.value(r), &[1.0, -2.0]);
    }

    #[test]
    fn broadcast_bias_add() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![2, 3], vec![0.0; 6]);
        let b = tape.input(&Tensor::vector(&[1.0, 2.0, 3.0]));
        let bb = tape.broadcast(b, &[2, 3]);
        let y = tape.add(x, bb);
        assert_eq!(tape.value(y), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
        let s = tape.sum(y);
        tape.backward(s);
        assert_eq!(tape.grad(b).unwrap(), &[2.0, 2.0, 2.0]);
    }

    #[test]
    fn concat_slice_roundtrip() {
        let mut tape = Tape::new();
        let a = tape.constant(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = tape.constant(vec![2, 1], vec![5.0, 6.0]);
        let c = tape.concat(&[a, b], 1);
        assert_eq!(tape.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let back = tape.slice(c, 1, 2, 1);
        assert_eq!(tape.value(back), &[5.0, 6.0]);
    }

    #[test]
    #[should_panic(expected = "produced by op `log`")]
    fn non_finite_is_loud() {
        let mut tape = Tape::new();
        let x = tape.constant(vec![1], vec![0.0]);
        let _ = tape.log(x);
    }

    #[test]
    fn backward_twice_resets() {
        let mut tape = Tape::new();
        let x = tape.input(&Tensor::vector(&[3.0]));
        let y = tape.mul(x, x);
        let s = tape.sum(y);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
        tape.backward(s);
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn conv2d_known_answer() {
        // 1x1x3x3 input, 1x1x2x2 kernel of ones, stride 1, no pad:
        // each output is the sum of a 2x2 patch.
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, 3, 3], (1..=9).map(f64::from).collect());
        let k = tape.constant(vec![1, 1, 2, 2], vec![1.0; 4]);
        let y = tape.conv2d(x, k, 1, 0);
        assert_eq!(tape.shape(y), &[1, 1, 2, 2]);
        assert_eq!(tape.value(y), &[12.0, 16.0, 24.0, 28.0]);
    }

    #[test]
    fn upsample_by_reshape_broadcast() {
        // [1,1,2,2] -> nearest-neighbour x2 -> [1,1,4,4]
        let mut tape = Tape::new();
        let x = tape.constant(vec![1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let r = tape.reshape(x, &[1, 1, 2, 1, 2, 1]);
        let b = tape.broadcast(r, &[1, 1, 2, 2, 2, 2]);
        let up = tape.reshape(b, &[1, 1, 4, 4]);
        assert_eq!(
            tape.value(up),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
    }
}
