//! Small feed-forward builders shared by the student and teacher: 2-layer
//! MLPs for vector data and two-convolution encoders/decoders for images.
//! Batches travel flat as [n, D]; conv nets reshape internally.

use diffcore::{BoundParams, ParamStore, Rng, Tape, Tensor, ValueId};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Relu,
}

fn activate(tape: &mut Tape, x: ValueId, act: Activation) -> ValueId {
    match act {
        Activation::Tanh => tape.tanh(x),
        Activation::Relu => tape.relu(x),
    }
}

/// Broadcast bias over rows: x [n, d] + b [d].
fn bias_add(tape: &mut Tape, x: ValueId, b: ValueId) -> ValueId {
    let shape = tape.shape(x).to_vec();
    let bb = tape.broadcast(b, &shape);
    tape.add(x, bb)
}

/// Broadcast bias over feature maps: x [n, c, h, w] + b [c].
fn channel_bias_add(tape: &mut Tape, x: ValueId, b: ValueId) -> ValueId {
    let shape = tape.shape(x).to_vec();
    let c = tape.shape(b)[0];
    let b3 = tape.reshape(b, &[c, 1, 1]);
    let bb = tape.broadcast(b3, &shape);
    tape.add(x, bb)
}

/// Nearest-neighbour 2x upsample of [n, c, h, w] via reshape + broadcast.
fn upsample2x(tape: &mut Tape, x: ValueId) -> ValueId {
    let s = tape.shape(x).to_vec();
    let (n, c, h, w) = (s[0], s[1], s[2], s[3]);
    let r = tape.reshape(x, &[n, c, h, 1, w, 1]);
    let b = tape.broadcast(r, &[n, c, h, 2, w, 2]);
    tape.reshape(b, &[n, c, 2 * h, 2 * w])
}

/// Fully connected stack: dims = [in, hidden.., out], activation on hidden
/// layers, linear output.
#[derive(Debug, Clone)]
pub struct MlpSpec {
    pub dims: Vec<usize>,
    pub activation: Activation,
}

impl MlpSpec {
    pub fn new(dims: Vec<usize>, activation: Activation) -> Self {
        assert!(dims.len() >= 2, "mlp needs at least input and output dims");
        assert!(dims.iter().all(|d| *d > 0));
        MlpSpec { dims, activation }
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        for i in 0..self.dims.len() - 1 {
            let (fan_in, fan_out) = (self.dims[i], self.dims[i + 1]);
            let scale = 1.0 / (fan_in as f64).sqrt();
            store.insert_normal(&format!("{prefix}.w{i}"), vec![fan_in, fan_out], scale, rng);
            store.insert_zeros(&format!("{prefix}.b{i}"), vec![fan_out]);
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: ValueId) -> ValueId {
        assert_eq!(tape.shape(x)[1], self.dims[0], "mlp input width mismatch");
        let mut h = x;
        for i in 0..self.dims.len() - 1 {
            let w = bound.id(&format!("{prefix}.w{i}"));
            let b = bound.id(&format!("{prefix}.b{i}"));
            h = tape.matmul(h, w);
            h = bias_add(tape, h, b);
            if i + 1 < self.dims.len() - 1 {
                h = activate(tape, h, self.activation);
            }
        }
        h
    }
}

/// Two stride-2 convolutions, relu between, linear head:
/// [n, c_in, h, w] -> [n, out]. Needs h and w divisible by 4.
#[derive(Debug, Clone)]
pub struct ConvEncoderSpec {
    pub in_shape: [usize; 3],
    pub c1: usize,
    pub c2: usize,
    pub out: usize,
}

impl ConvEncoderSpec {
    fn spatial_out(&self) -> (usize, usize) {
        let [_, h, w] = self.in_shape;
        assert!(h % 4 == 0 && w % 4 == 0, "conv encoder needs h, w divisible by 4, got {}x{}", h, w);
        (h / 4, w / 4)
    }

    pub fn flat_dim(&self) -> usize {
        let (h4, w4) = self.spatial_out();
        self.c2 * h4 * w4
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        let [cin, _, _] = self.in_shape;
        let s1 = (2.0 / (cin * 9) as f64).sqrt();
        let s2 = (2.0 / (self.c1 * 9) as f64).sqrt();
        store.insert_normal(&format!("{prefix}.conv1.k"), vec![self.c1, cin, 3, 3], s1, rng);
        store.insert_zeros(&format!("{prefix}.conv1.b"), vec![self.c1]);
        store.insert_normal(&format!("{prefix}.conv2.k"), vec![self.c2, self.c1, 3, 3], s2, rng);
        store.insert_zeros(&format!("{prefix}.conv2.b"), vec![self.c2]);
        let flat = self.flat_dim();
        let sf = 1.0 / (flat as f64).sqrt();
        store.insert_normal(&format!("{prefix}.fc.w"), vec![flat, self.out], sf, rng);
        store.insert_zeros(&format!("{prefix}.fc.b"), vec![self.out]);
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: ValueId) -> ValueId {
        let [cin, h, w] = self.in_shape;
        let n = tape.shape(x)[0];
        assert_eq!(tape.shape(x)[1], cin * h * w, "conv encoder input width mismatch");
        let img = tape.reshape(x, &[n, cin, h, w]);
        let k1 = bound.id(&format!("{prefix}.conv1.k"));
        let b1 = bound.id(&format!("{prefix}.conv1.b"));
        let mut hmap = tape.conv2d(img, k1, 2, 1);
        hmap = channel_bias_add(tape, hmap, b1);
        hmap = tape.relu(hmap);
        let k2 = bound.id(&format!("{prefix}.conv2.k"));
        let b2 = bound.id(&format!("{prefix}.conv2.b"));
        hmap = tape.conv2d(hmap, k2, 2, 1);
        hmap = channel_bias_add(tape, hmap, b2);
        hmap = tape.relu(hmap);
        let flat = tape.reshape(hmap, &[n, self.flat_dim()]);
        let w_fc = bound.id(&format!("{prefix}.fc.w"));
        let b_fc = bound.id(&format!("{prefix}.fc.b"));
        let out = tape.matmul(flat, w_fc);
        bias_add(tape, out, b_fc)
    }
}

/// Mirror of the encoder: linear -> relu -> (upsample, conv) x2:
/// [n, in_dim] -> [n, c_out * h * w] logits.
#[derive(Debug, Clone)]
pub struct ConvDecoderSpec {
    pub out_shape: [usize; 3],
    pub c1: usize,
    pub c2: usize,
    pub in_dim: usize,
}

impl ConvDecoderSpec {
    fn spatial_in(&self) -> (usize, usize) {
        let [_, h, w] = self.out_shape;
        assert!(h % 4 == 0 && w % 4 == 0, "conv decoder needs h, w divisible by 4, got {}x{}", h, w);
        (h / 4, w / 4)
    }

    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        let (h0, w0) = self.spatial_in();
        let flat = self.c2 * h0 * w0;
        let sf = 1.0 / (self.in_dim as f64).sqrt();
        store.insert_normal(&format!("{prefix}.fc.w"), vec![self.in_dim, flat], sf, rng);
        store.insert_zeros(&format!("{prefix}.fc.b"), vec![flat]);
        let s1 = (2.0 / (self.c2 * 9) as f64).sqrt();
        store.insert_normal(&format!("{prefix}.conv1.k"), vec![self.c1, self.c2, 3, 3], s1, rng);
        store.insert_zeros(&format!("{prefix}.conv1.b"), vec![self.c1]);
        let [cout, _, _] = self.out_shape;
        let s2 = (2.0 / (self.c1 * 9) as f64).sqrt();
        store.insert_normal(&format!("{prefix}.conv2.k"), vec![cout, self.c1, 3, 3], s2, rng);
        store.insert_zeros(&format!("{prefix}.conv2.b"), vec![cout]);
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: ValueId) -> ValueId {
        let [cout, h, w] = self.out_shape;
        let (h0, w0) = self.spatial_in();
        let n = tape.shape(x)[0];
        assert_eq!(tape.shape(x)[1], self.in_dim, "conv decoder input width mismatch");
        let w_fc = bound.id(&format!("{prefix}.fc.w"));
        let b_fc = bound.id(&format!("{prefix}.fc.b"));
        let mut hmap = tape.matmul(x, w_fc);
        hmap = bias_add(tape, hmap, b_fc);
        hmap = tape.relu(hmap);
        let mut hmap = tape.reshape(hmap, &[n, self.c2, h0, w0]);
        hmap = upsample2x(tape, hmap);
        let k1 = bound.id(&format!("{prefix}.conv1.k"));
        let b1 = bound.id(&format!("{prefix}.conv1.b"));
        hmap = tape.conv2d(hmap, k1, 1, 1);
        hmap = channel_bias_add(tape, hmap, b1);
        hmap = tape.relu(hmap);
        hmap = upsample2x(tape, hmap);
        let k2 = bound.id(&format!("{prefix}.conv2.k"));
        let b2 = bound.id(&format!("{prefix}.conv2.b"));
        hmap = tape.conv2d(hmap, k2, 1, 1);
        hmap = channel_bias_add(tape, hmap, b2);
        tape.reshape(hmap, &[n, cout * h * w])
    }
}

/// Data-to-vector network.
#[derive(Debug, Clone)]
pub enum EncoderNet {
    Mlp(MlpSpec),
    Conv(ConvEncoderSpec),
}

impl EncoderNet {
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        match self {
            EncoderNet::Mlp(m) => m.init(store, prefix, rng),
            EncoderNet::Conv(c) => c.init(store, prefix, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: ValueId) -> ValueId {
        match self {
            EncoderNet::Mlp(m) => m.forward(tape, bound, prefix, x),
            EncoderNet::Conv(c) => c.forward(tape, bound, prefix, x),
        }
    }
}

/// Vector-to-data network emitting flat logits.
#[derive(Debug, Clone)]
pub enum DecoderNet {
    Mlp(MlpSpec),
    Conv(ConvDecoderSpec),
}

impl DecoderNet {
    pub fn init(&self, store: &mut ParamStore, prefix: &str, rng: &mut Rng) {
        match self {
            DecoderNet::Mlp(m) => m.init(store, prefix, rng),
            DecoderNet::Conv(c) => c.init(store, prefix, rng),
        }
    }

    pub fn forward(&self, tape: &mut Tape, bound: &BoundParams, prefix: &str, x: ValueId) -> ValueId {
        match self {
            DecoderNet::Mlp(m) => m.forward(tape, bound, prefix, x),
            DecoderNet::Conv(c) => c.forward(tape, bound, prefix, x),
        }
    }
}

/// Constant one-hot rows for a batch of class indices.
pub fn one_hot_rows(indices: &[usize], width: usize) -> Tensor {
    let mut data = vec![0.0; indices.len() * width];
    for (i, &c) in indices.iter().enumerate() {
        assert!(c < width, "index {} out of one-hot width {}", c, width);
        data[i * width + c] = 1.0;
    }
    Tensor::new(vec![indices.len(), width], data)
}

/// Batch-mean cross-entropy of logits [n, k] against integer targets.
pub fn cross_entropy_on(tape: &mut Tape, logits: ValueId, targets: &[usize]) -> ValueId {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(shape[0], targets.len(), "target count mismatch");
    let probs = tape.softmax(logits);
    let logp = tape.log(probs);
    let mask = one_hot_rows(targets, shape[1]);
    let mask = tape.constant_from(&mask);
    let picked = tape.mul(logp, mask);
    let total = tape.sum(picked);
    tape.scale(total, -1.0 / targets.len() as f64)
}

/// Batch-mean Bernoulli negative log-likelihood of logits [n, D] against
/// targets in [0, 1], in the log-sigmoid form
/// nll = -(t log sigmoid(u) + (1 - t) log sigmoid(-u))
/// which is smooth in u everywhere (the relu/abs softplus composition has a
/// spurious zero subgradient exactly at u = 0).
pub fn bernoulli_nll_on(tape: &mut Tape, logits: ValueId, targets: &Tensor) -> ValueId {
    let shape = tape.shape(logits).to_vec();
    assert_eq!(targets.shape(), shape.as_slice(), "target shape mismatch");
    let t = tape.constant_from(targets);
    let one_minus_t = {
        let data: Vec<f64> = targets.data().iter().map(|v| 1.0 - v).collect();
        let tt = Tensor::new(shape.clone(), data);
        tape.constant_from(&tt)
    };
    let sig_pos = tape.sigmoid(logits);
    let ls_pos = tape.log(sig_pos);
    let neg_logits = tape.neg(logits);
    let sig_neg = tape.sigmoid(neg_logits);
    let ls_neg = tape.log(sig_neg);
    let a = tape.mul(t, ls_pos);
    let b = tape.mul(one_minus_t, ls_neg);
    let per = tape.add(a, b);
    let total = tape.sum(per);
    tape.scale(total, -1.0 / shape[0] as f64)
}

/// Batch-mean Gaussian negative log-likelihood with fixed sigma of
/// sigmoid(logits) against targets (normalization constants included).
pub fn gaussian_nll_on(tape: &mut Tape, logits: ValueId, targets: &Tensor, sigma: f64) -> ValueId {
    assert!(sigma > 0.0);
    let shape = tape.shape(logits).to_vec();
    assert_eq!(targets.shape(), shape.as_slice(), "target shape mismatch");
    let mean = tape.sigmoid(logits);
    let t = tape.constant_from(targets);
    let diff = tape.sub(mean, t);
    let sq = tape.mul(diff, diff);
    let total = tape.sum(sq);
    let quad = tape.scale(total, 0.5 / (sigma * sigma * shape[0] as f64));
    let d = shape[1] as f64;
    let log_norm = d * (sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln());
    tape.add_scalar(quad, log_norm)
}
