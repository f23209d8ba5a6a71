//! The VAE student: three encoders (continuous z, domain, class), one
//! decoder, an auxiliary adversary on z, and the supervised, semi-supervised
//! and unsupervised training objectives.
//!
//! Every loss exists in two forms over the same injected noise: a value-only
//! form (finite-difference oracles, evaluation) and a gradient form that
//! runs backward and absorbs gradients into the parameter stores. Training
//! steps then apply Adam per store.

use diffcore::{BoundParams, ParamStore, Rng, Tape, Tensor, ValueId};

use crate::error::ModelError;
use crate::latents::{
    argmax, gumbel_softmax_on, kl_categorical_on, kl_gaussian_conditional_on, reparameterize_on,
    ConditionalPrior, DomainPrior, GaussianPosterior,
};
use crate::nets::{
    bernoulli_nll_on, cross_entropy_on, gaussian_nll_on, one_hot_rows, Activation,
    ConvDecoderSpec, ConvEncoderSpec, DecoderNet, EncoderNet, MlpSpec,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TrainingMode {
    Supervised,
    SemiSupervised,
    Unsupervised,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ReconLikelihood {
    Bernoulli,
    GaussianMse { sigma: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Arch {
    /// Conv for image-shaped inputs with sides divisible by 4, MLP otherwise.
    Auto,
    Mlp { hidden: usize },
    /// Stacked hidden layers of one width.
    MlpDeep { hidden: usize, layers: usize },
    Conv { c1: usize, c2: usize },
}

#[derive(Debug, Clone)]
pub struct StudentConfig {
    /// [channels, height, width] for images, [dim] for vectors.
    pub input_shape: Vec<usize>,
    pub d_z: usize,
    pub l_m: usize,
    pub k_max: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub beta3: f64,
    /// Weight of the unsupervised term in the semi-supervised loss.
    pub a: f64,
    pub temperature: f64,
    pub adversary_scale: f64,
    pub sigma_prior: f64,
    pub prior_spacing: f64,
    pub recon: ReconLikelihood,
    pub mode: TrainingMode,
    pub arch: Arch,
}

impl StudentConfig {
    pub fn new(input_shape: Vec<usize>, d_z: usize, l_m: usize, k_max: usize) -> Self {
        assert!(d_z >= 1 && l_m >= 1 && k_max >= 1);
        StudentConfig {
            input_shape,
            d_z,
            l_m,
            k_max,
            beta1: 1.0,
            beta2: 0.01,
            beta3: 0.01,
            a: 1.0,
            temperature: 0.5,
            adversary_scale: 1.0,
            sigma_prior: 1.0,
            prior_spacing: 3.0,
            recon: ReconLikelihood::Bernoulli,
            mode: TrainingMode::Supervised,
            arch: Arch::Auto,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn validate(&self) {
        assert!(self.beta1 >= 0.0 && self.beta2 >= 0.0 && self.beta3 >= 0.0, "betas must be >= 0");
        assert!(self.a >= 0.0, "a must be >= 0");
        assert!(self.temperature > 0.0, "temperature must be positive");
        assert!(self.sigma_prior > 0.0);
        assert!(!self.input_shape.is_empty());
    }
}

/// Posteriors for a single input.
#[derive(Debug, Clone)]
pub struct PosteriorBundle {
    pub z_post: GaussianPosterior,
    pub delta_probs: Vec<f64>,
    pub s_probs: Vec<f64>,
}

/// Posteriors for a batch: mu/log_sigma [n, d_z], simplexes [n, K] / [n, L].
#[derive(Debug, Clone)]
pub struct PosteriorBatch {
    pub mu: Tensor,
    pub log_sigma: Tensor,
    pub delta_probs: Tensor,
    pub s_probs: Tensor,
}

impl PosteriorBatch {
    pub fn bundle(&self, row: usize) -> PosteriorBundle {
        let d = self.mu.shape()[1];
        let k = self.delta_probs.shape()[1];
        let l = self.s_probs.shape()[1];
        PosteriorBundle {
            z_post: GaussianPosterior::new(
                Tensor::vector(&self.mu.data()[row * d..(row + 1) * d]),
                Tensor::vector(&self.log_sigma.data()[row * d..(row + 1) * d]),
            ),
            delta_probs: self.delta_probs.data()[row * k..(row + 1) * k].to_vec(),
            s_probs: self.s_probs.data()[row * l..(row + 1) * l].to_vec(),
        }
    }
}

/// Inputs with class and domain labels; x is [n, D] flat.
#[derive(Debug, Clone)]
pub struct LabeledBatch {
    pub x: Tensor,
    pub y: Vec<usize>,
    pub d: Vec<usize>,
}

/// Inputs with domain labels only.
#[derive(Debug, Clone)]
pub struct UnlabeledBatch {
    pub x: Tensor,
    pub d: Vec<usize>,
}

/// Injected randomness for one loss evaluation, so the same scalar can be
/// rebuilt exactly for finite differencing and determinism checks.
#[derive(Debug, Clone)]
pub struct NoiseBundle {
    pub z: Tensor,
    pub gumbel: Option<Tensor>,
    pub unlabeled_z: Option<Tensor>,
    pub unlabeled_gumbel: Option<Tensor>,
}

impl NoiseBundle {
    pub fn for_supervised(n: usize, d_z: usize, l_m: usize, rng: &mut Rng) -> Self {
        NoiseBundle {
            z: Tensor::new(vec![n, d_z], rng.normal_vec(n * d_z)),
            gumbel: Some(Tensor::new(vec![n, l_m], rng.gumbel_vec(n * l_m))),
            unlabeled_z: None,
            unlabeled_gumbel: None,
        }
    }

    pub fn for_unsupervised(n: usize, d_z: usize, rng: &mut Rng) -> Self {
        NoiseBundle {
            z: Tensor::new(vec![n, d_z], rng.normal_vec(n * d_z)),
            gumbel: None,
            unlabeled_z: None,
            unlabeled_gumbel: None,
        }
    }

    pub fn for_semi(nl: usize, nu: usize, d_z: usize, l_m: usize, rng: &mut Rng) -> Self {
        NoiseBundle {
            z: Tensor::new(vec![nl, d_z], rng.normal_vec(nl * d_z)),
            gumbel: None,
            unlabeled_z: if nu > 0 {
                Some(Tensor::new(vec![nu, d_z], rng.normal_vec(nu * d_z)))
            } else {
                None
            },
            unlabeled_gumbel: if nu > 0 {
                Some(Tensor::new(vec![nu, l_m], rng.gumbel_vec(nu * l_m)))
            } else {
                None
            },
        }
    }
}

/// Per-component loss values; `total` is the scalar the mode's optimizer
/// minimizes (the adversarial independence term is reported separately).
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct StudentLosses {
    pub total: f64,
    pub recon: f64,
    pub kl_z: f64,
    pub kl_delta: f64,
    pub kl_s: f64,
    pub ce_s: f64,
    pub ce_delta: f64,
    pub independence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreKind {
    Theta1,
    Theta2,
    Theta3,
    Omega,
    Zeta,
}

pub const ALL_STORES: [StoreKind; 5] =
    [StoreKind::Theta1, StoreKind::Theta2, StoreKind::Theta3, StoreKind::Omega, StoreKind::Zeta];

/// What the decoder receives in the class slot.
#[derive(Debug, Clone)]
enum SDecodeSource {
    /// Gumbel-softmax sample from the class encoder.
    Relaxed,
    /// Ground-truth one-hot of the labels (semi-supervised labeled branch).
    LabelOneHot,
    /// A fixed vector, identical for every sample (unsupervised mode).
    Fixed(Vec<f64>),
}

struct ElboIds {
    recon: ValueId,
    kl_z: ValueId,
    kl_delta: ValueId,
    kl_s: Option<ValueId>,
    ce_s: Option<ValueId>,
    ce_delta: Option<ValueId>,
}

/// Bindings created while building one loss graph, so gradients can be
/// absorbed back into the owning stores after backward.
struct GraphBounds {
    bounds: Vec<(StoreKind, BoundParams)>,
}

impl GraphBounds {
    fn new() -> Self {
        GraphBounds { bounds: Vec::new() }
    }

    fn bind(&mut self, tape: &mut Tape, kind: StoreKind, store: &ParamStore) -> BoundParams {
        let b = store.bind(tape);
        self.bounds.push((kind, b.clone()));
        b
    }
}

#[derive(Debug, Clone)]
pub struct StudentModel {
    cfg: StudentConfig,
    pub theta1: ParamStore,
    pub theta2: ParamStore,
    pub theta3: ParamStore,
    pub omega: ParamStore,
    pub zeta: ParamStore,
    enc_z: EncoderNet,
    enc_d: EncoderNet,
    enc_s: EncoderNet,
    dec: DecoderNet,
    adv: MlpSpec,
    prior: ConditionalPrior,
    domain_prior: DomainPrior,
    s_prior: Vec<f64>,
}

fn conv_applicable(input_shape: &[usize]) -> bool {
    input_shape.len() == 3
        && input_shape[1] % 4 == 0
        && input_shape[2] % 4 == 0
        && input_shape[1] >= 8
        && input_shape[2] >= 8
}

fn resolve_encoder(arch: Arch, input_shape: &[usize], out: usize) -> EncoderNet {
    let flat: usize = input_shape.iter().product();
    match arch {
        Arch::Mlp { hidden } => {
            EncoderNet::Mlp(MlpSpec::new(vec![flat, hidden, out], Activation::Tanh))
        }
        Arch::MlpDeep { hidden, layers } => {
            let mut dims = vec![flat];
            dims.extend(std::iter::repeat(hidden).take(layers.max(1)));
            dims.push(out);
            EncoderNet::Mlp(MlpSpec::new(dims, Activation::Tanh))
        }
        Arch::Conv { c1, c2 } => EncoderNet::Conv(ConvEncoderSpec {
            in_shape: [input_shape[0], input_shape[1], input_shape[2]],
            c1,
            c2,
            out,
        }),
        Arch::Auto => {
            if conv_applicable(input_shape) {
                resolve_encoder(Arch::Conv { c1: 32, c2: 64 }, input_shape, out)
            } else {
                resolve_encoder(Arch::Mlp { hidden: 64 }, input_shape, out)
            }
        }
    }
}

fn resolve_decoder(arch: Arch, input_shape: &[usize], in_dim: usize) -> DecoderNet {
    let flat: usize = input_shape.iter().product();
    match arch {
        Arch::Mlp { hidden } => {
            DecoderNet::Mlp(MlpSpec::new(vec![in_dim, hidden, flat], Activation::Tanh))
        }
        Arch::MlpDeep { hidden, layers } => {
            let mut dims = vec![in_dim];
            dims.extend(std::iter::repeat(hidden).take(layers.max(1)));
            dims.push(flat);
            DecoderNet::Mlp(MlpSpec::new(dims, Activation::Tanh))
        }
        Arch::Conv { c1, c2 } => DecoderNet::Conv(ConvDecoderSpec {
            out_shape: [input_shape[0], input_shape[1], input_shape[2]],
            c1,
            c2,
            in_dim,
        }),
        Arch::Auto => {
            if conv_applicable(input_shape) {
                resolve_decoder(Arch::Conv { c1: 32, c2: 64 }, input_shape, in_dim)
            } else {
                resolve_decoder(Arch::Mlp { hidden: 64 }, input_shape, in_dim)
            }
        }
    }
}

impl StudentModel {
    pub fn new(cfg: StudentConfig, rng: &mut Rng) -> Self {
        cfg.validate();
        let dec_in = cfg.d_z + cfg.l_m + cfg.k_max;
        let enc_z = resolve_encoder(cfg.arch, &cfg.input_shape, 2 * cfg.d_z);
        let enc_d = resolve_encoder(cfg.arch, &cfg.input_shape, cfg.k_max);
        let enc_s = resolve_encoder(cfg.arch, &cfg.input_shape, cfg.l_m);
        let dec = resolve_decoder(cfg.arch, &cfg.input_shape, dec_in);
        let adv = MlpSpec::new(vec![cfg.d_z, 32, cfg.l_m], Activation::Tanh);

        let mut theta1 = ParamStore::new();
        enc_z.init(&mut theta1, "enc_z", rng);
        let mut theta2 = ParamStore::new();
        enc_d.init(&mut theta2, "enc_d", rng);
        let mut theta3 = ParamStore::new();
        enc_s.init(&mut theta3, "enc_s", rng);
        let mut omega = ParamStore::new();
        dec.init(&mut omega, "dec", rng);
        let mut zeta = ParamStore::new();
        adv.init(&mut zeta, "adv", rng);

        let prior = ConditionalPrior::well_separated(cfg.k_max, cfg.d_z, cfg.prior_spacing)
            .with_sigma_prior(cfg.sigma_prior);
        let domain_prior = DomainPrior::uniform(cfg.k_max);
        let s_prior = vec![1.0 / cfg.l_m as f64; cfg.l_m];
        StudentModel {
            cfg,
            theta1,
            theta2,
            theta3,
            omega,
            zeta,
            enc_z,
            enc_d,
            enc_s,
            dec,
            adv,
            prior,
            domain_prior,
            s_prior,
        }
    }

    pub fn config(&self) -> &StudentConfig {
        &self.cfg
    }

    pub fn prior(&self) -> &ConditionalPrior {
        &self.prior
    }

    pub fn domain_prior(&self) -> &DomainPrior {
        &self.domain_prior
    }

    pub fn store(&self, kind: StoreKind) -> &ParamStore {
        match kind {
            StoreKind::Theta1 => &self.theta1,
            StoreKind::Theta2 => &self.theta2,
            StoreKind::Theta3 => &self.theta3,
            StoreKind::Omega => &self.omega,
            StoreKind::Zeta => &self.zeta,
        }
    }

    pub fn store_mut(&mut self, kind: StoreKind) -> &mut ParamStore {
        match kind {
            StoreKind::Theta1 => &mut self.theta1,
            StoreKind::Theta2 => &mut self.theta2,
            StoreKind::Theta3 => &mut self.theta3,
            StoreKind::Omega => &mut self.omega,
            StoreKind::Zeta => &mut self.zeta,
        }
    }

    fn absorb(&mut self, tape: &Tape, bounds: &GraphBounds) {
        for (kind, bound) in &bounds.bounds {
            self.store_mut(*kind).absorb_grads(tape, bound);
        }
    }

    fn check_batch(&self, x: &Tensor, y: Option<&[usize]>, d: &[usize]) -> Result<(), ModelError> {
        let n = x.shape()[0];
        if n == 0 {
            return Err(ModelError::EmptyBatch);
        }
        assert_eq!(x.shape().len(), 2, "batches are [n, D]");
        if x.shape()[1] != self.cfg.input_dim() {
            return Err(ModelError::InconsistentInputShape {
                expected: vec![n, self.cfg.input_dim()],
                got: x.shape().to_vec(),
            });
        }
        assert_eq!(d.len(), n, "domain labels must cover the batch");
        if let Some(y) = y {
            assert_eq!(y.len(), n, "class labels must cover the batch");
            for &yi in y {
                if yi >= self.cfg.l_m {
                    return Err(ModelError::InvalidLabel { index: yi, bound: self.cfg.l_m });
                }
            }
        }
        for &di in d {
            if di >= self.cfg.k_max {
                return Err(ModelError::InvalidDomain { index: di, bound: self.cfg.k_max });
            }
        }
        Ok(())
    }

    // ---- inference -------------------------------------------------------

    /// Deterministic encoder pass over a batch [n, D].
    pub fn infer_batch(&self, x: &Tensor) -> PosteriorBatch {
        let mut tape = Tape::new();
        let b1 = self.theta1.bind(&mut tape);
        let b2 = self.theta2.bind(&mut tape);
        let b3 = self.theta3.bind(&mut tape);
        let xid = tape.constant_from(x);
        let zp = self.enc_z.forward(&mut tape, &b1, "enc_z", xid);
        let mu = tape.slice(zp, 1, 0, self.cfg.d_z);
        let ls = tape.slice(zp, 1, self.cfg.d_z, self.cfg.d_z);
        let dl = self.enc_d.forward(&mut tape, &b2, "enc_d", xid);
        let dp = tape.softmax(dl);
        let sl = self.enc_s.forward(&mut tape, &b3, "enc_s", xid);
        let sp = tape.softmax(sl);
        PosteriorBatch {
            mu: tape.tensor(mu),
            log_sigma: tape.tensor(ls),
            delta_probs: tape.tensor(dp),
            s_probs: tape.tensor(sp),
        }
    }

    /// Posteriors for a single input of shape [D] (or the input shape).
    pub fn infer(&self, x: &Tensor) -> PosteriorBundle {
        assert_eq!(x.numel(), self.cfg.input_dim(), "input element count mismatch");
        let row = Tensor::new(vec![1, x.numel()], x.data().to_vec());
        self.infer_batch(&row).bundle(0)
    }

    /// Decoder means in (0, 1) for a single latent triple, shaped like the input.
    pub fn decode(&self, z: &[f64], s: &[f64], delta: &[f64]) -> Tensor {
        assert_eq!(z.len(), self.cfg.d_z, "z length");
        assert_eq!(s.len(), self.cfg.l_m, "s length");
        assert_eq!(delta.len(), self.cfg.k_max, "delta length");
        let mut input = Vec::with_capacity(z.len() + s.len() + delta.len());
        input.extend_from_slice(z);
        input.extend_from_slice(s);
        input.extend_from_slice(delta);
        let batch = Tensor::new(vec![1, input.len()], input);
        let means = self.decode_means_batch(&batch);
        Tensor::new(self.cfg.input_shape.clone(), means.data().to_vec())
    }

    /// Decoder means for a batch of concatenated latents [n, d_z + L + K].
    pub fn decode_means_batch(&self, latents: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bo = self.omega.bind(&mut tape);
        let lid = tape.constant_from(latents);
        let logits = self.dec.forward(&mut tape, &bo, "dec", lid);
        let means = tape.sigmoid(logits);
        tape.tensor(means)
    }

    /// Decoder logits for a batch of concatenated latents.
    pub fn decode_logits_batch(&self, latents: &Tensor) -> Tensor {
        let mut tape = Tape::new();
        let bo = self.omega.bind(&mut tape);
        let lid = tape.constant_from(latents);
        let logits = self.dec.forward(&mut tape, &bo, "dec", lid);
        tape.tensor(logits)
    }

    /// Adversary predictions from the posterior-mean z, for diagnostics of
    /// the independence objective.
    pub fn adversary_predict_batch(&self, x: &Tensor) -> Vec<usize> {
        let post = self.infer_batch(x);
        let mut tape = Tape::new();
        let bz = self.zeta.bind(&mut tape);
        let zid = tape.constant_from(&post.mu);
        let logits = self.adv.forward(&mut tape, &bz, "adv", zid);
        let l = self.cfg.l_m;
        (0..x.shape()[0]).map(|i| argmax(&tape.value(logits)[i * l..(i + 1) * l])).collect()
    }

    /// Class prediction: argmax of the class posterior, lowest index on ties.
    pub fn classify(&self, x: &Tensor) -> Result<usize, ModelError> {
        if self.cfg.mode == TrainingMode::Unsupervised {
            return Err(ModelError::WrongMode { op: "classify" });
        }
        Ok(argmax(&self.infer(x).s_probs))
    }

    /// Batched classification (one encoder pass over the whole batch).
    pub fn classify_batch(&self, x: &Tensor) -> Result<Vec<usize>, ModelError> {
        if self.cfg.mode == TrainingMode::Unsupervised {
            return Err(ModelError::WrongMode { op: "classify" });
        }
        let post = self.infer_batch(x);
        let l = self.cfg.l_m;
        Ok((0..x.shape()[0]).map(|i| argmax(&post.s_probs.data()[i * l..(i + 1) * l])).collect())
    }

    // ---- loss graphs -----------------------------------------------------

    fn recon_loss_on(&self, tape: &mut Tape, logits: ValueId, x: &Tensor) -> ValueId {
        match self.cfg.recon {
            ReconLikelihood::Bernoulli => bernoulli_nll_on(tape, logits, x),
            ReconLikelihood::GaussianMse { sigma } => gaussian_nll_on(tape, logits, x, sigma),
        }
    }

    /// Shared ELBO-with-heads graph over one batch.
    #[allow(clippy::too_many_arguments)]
    fn build_elbo(
        &self,
        tape: &mut Tape,
        bounds: &mut GraphBounds,
        x: &Tensor,
        y: Option<&[usize]>,
        d: &[usize],
        z_noise: &Tensor,
        gumbel: Option<&Tensor>,
        s_source: &SDecodeSource,
        with_kl_s: bool,
        with_heads: bool,
    ) -> ElboIds {
        let b1 = bounds.bind(tape, StoreKind::Theta1, &self.theta1);
        let b2 = bounds.bind(tape, StoreKind::Theta2, &self.theta2);
        let bo = bounds.bind(tape, StoreKind::Omega, &self.omega);
        let xid = tape.constant_from(x);

        let zp = self.enc_z.forward(tape, &b1, "enc_z", xid);
        let mu = tape.slice(zp, 1, 0, self.cfg.d_z);
        let ls = tape.slice(zp, 1, self.cfg.d_z, self.cfg.d_z);
        let z = reparameterize_on(tape, mu, ls, z_noise);

        let d_logits = self.enc_d.forward(tape, &b2, "enc_d", xid);
        let d_probs = tape.softmax(d_logits);

        // The class encoder runs whenever s is inferred or its head trains.
        let needs_class_path =
            with_kl_s || matches!(s_source, SDecodeSource::Relaxed) || (with_heads && y.is_some());
        let (s_logits, s_probs) = if needs_class_path {
            let b3 = bounds.bind(tape, StoreKind::Theta3, &self.theta3);
            let sl = self.enc_s.forward(tape, &b3, "enc_s", xid);
            let sp = tape.softmax(sl);
            (Some(sl), Some(sp))
        } else {
            (None, None)
        };

        let s_dec = match s_source {
            SDecodeSource::Relaxed => {
                let sl = s_logits.expect("relaxed s needs the class encoder");
                gumbel_softmax_on(
                    tape,
                    sl,
                    gumbel.expect("relaxed s needs gumbel noise"),
                    self.cfg.temperature,
                )
            }
            SDecodeSource::LabelOneHot => {
                let rows = one_hot_rows(y.expect("label one-hot needs labels"), self.cfg.l_m);
                tape.constant_from(&rows)
            }
            SDecodeSource::Fixed(v) => {
                assert_eq!(v.len(), self.cfg.l_m);
                let n = x.shape()[0];
                let row = tape.constant(vec![self.cfg.l_m], v.clone());
                tape.broadcast(row, &[n, self.cfg.l_m])
            }
        };

        // Ground-truth one-hot domain feeds the decoder; the domain encoder
        // still trains through its KL term and cross-entropy head.
        let delta_dec = {
            let rows = one_hot_rows(d, self.cfg.k_max);
            tape.constant_from(&rows)
        };

        let dec_in = tape.concat(&[z, s_dec, delta_dec], 1);
        let x_logits = self.dec.forward(tape, &bo, "dec", dec_in);
        let recon = self.recon_loss_on(tape, x_logits, x);

        let prior_rows = self.prior.gather_rows(d);
        let kl_z = kl_gaussian_conditional_on(tape, mu, ls, &prior_rows, self.cfg.sigma_prior);
        let kl_delta = kl_categorical_on(tape, d_probs, self.domain_prior.weights());
        let kl_s = if with_kl_s {
            Some(kl_categorical_on(tape, s_probs.expect("class path"), &self.s_prior))
        } else {
            None
        };

        let (ce_s, ce_delta) = if with_heads {
            let ce_s = y.map(|y| cross_entropy_on(tape, s_logits.expect("class path"), y));
            let ce_d = Some(cross_entropy_on(tape, d_logits, d));
            (ce_s, ce_d)
        } else {
            (None, None)
        };

        ElboIds { recon, kl_z, kl_delta, kl_s, ce_s, ce_delta }
    }

    fn combine(&self, tape: &mut Tape, ids: &ElboIds) -> ValueId {
        let kz = tape.scale(ids.kl_z, self.cfg.beta1);
        let kd = tape.scale(ids.kl_delta, self.cfg.beta2);
        let mut total = tape.add(ids.recon, kz);
        total = tape.add(total, kd);
        if let Some(ks) = ids.kl_s {
            let ks = tape.scale(ks, self.cfg.beta3);
            total = tape.add(total, ks);
        }
        if let Some(ce) = ids.ce_s {
            total = tape.add(total, ce);
        }
        if let Some(ce) = ids.ce_delta {
            total = tape.add(total, ce);
        }
        total
    }

    fn losses_from(&self, tape: &Tape, ids: &ElboIds, total: ValueId) -> StudentLosses {
        StudentLosses {
            total: tape.item(total),
            recon: tape.item(ids.recon),
            kl_z: tape.item(ids.kl_z),
            kl_delta: tape.item(ids.kl_delta),
            kl_s: ids.kl_s.map(|id| tape.item(id)).unwrap_or(0.0),
            ce_s: ids.ce_s.map(|id| tape.item(id)).unwrap_or(0.0),
            ce_delta: ids.ce_delta.map(|id| tape.item(id)).unwrap_or(0.0),
            independence: 0.0,
        }
    }

    // ---- supervised objective ---------------------------------------------

    fn build_supervised(
        &self,
        tape: &mut Tape,
        bounds: &mut GraphBounds,
        batch: &LabeledBatch,
        noise: &NoiseBundle,
        s_source: &SDecodeSource,
        with_kl_s: bool,
    ) -> (ElboIds, ValueId) {
        let ids = self.build_elbo(
            tape,
            bounds,
            &batch.x,
            Some(&batch.y),
            &batch.d,
            &noise.z,
            noise.gumbel.as_ref(),
            s_source,
            with_kl_s,
            true,
        );
        let total = self.combine(tape, &ids);
        (ids, total)
    }

    /// Supervised objective: reconstruction NLL + beta-weighted KL terms plus
    /// both cross-entropy heads. Backward-propagates and absorbs gradients
    /// into theta1..3 and omega.
    pub fn loss_supervised(
        &mut self,
        batch: &LabeledBatch,
        noise: &NoiseBundle,
    ) -> Result<StudentLosses, ModelError> {
        self.check_batch(&batch.x, Some(&batch.y), &batch.d)?;
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let (ids, total) =
            self.build_supervised(&mut tape, &mut bounds, batch, noise, &SDecodeSource::Relaxed, true);
        tape.backward(total);
        self.absorb(&tape, &bounds);
        Ok(self.losses_from(&tape, &ids, total))
    }

    /// Value-only supervised objective (no gradients).
    pub fn loss_supervised_value(
        &self,
        batch: &LabeledBatch,
        noise: &NoiseBundle,
    ) -> Result<StudentLosses, ModelError> {
        self.check_batch(&batch.x, Some(&batch.y), &batch.d)?;
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let (ids, total) =
            self.build_supervised(&mut tape, &mut bounds, batch, noise, &SDecodeSource::Relaxed, true);
        Ok(self.losses_from(&tape, &ids, total))
    }

    /// Supervised objective with the decoder's class slot forced to the label
    /// one-hot instead of a relaxed sample (test hook for mode consistency).
    pub fn loss_supervised_forced_onehot_value(
        &self,
        batch: &LabeledBatch,
        noise: &NoiseBundle,
        with_kl_s: bool,
    ) -> Result<StudentLosses, ModelError> {
        self.check_batch(&batch.x, Some(&batch.y), &batch.d)?;
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let (ids, total) = self.build_supervised(
            &mut tape,
            &mut bounds,
            batch,
            noise,
            &SDecodeSource::LabelOneHot,
            with_kl_s,
        );
        Ok(self.losses_from(&tape, &ids, total))
    }

    // ---- adversarial independence (z vs s) ---------------------------------

    fn build_independence(
        &self,
        tape: &mut Tape,
        bounds: &mut GraphBounds,
        x: &Tensor,
        y: &[usize],
        z_noise: &Tensor,
    ) -> ValueId {
        let b1 = bounds.bind(tape, StoreKind::Theta1, &self.theta1);
        let bz = bounds.bind(tape, StoreKind::Zeta, &self.zeta);
        let xid = tape.constant_from(x);
        let zp = self.enc_z.forward(tape, &b1, "enc_z", xid);
        let mu = tape.slice(zp, 1, 0, self.cfg.d_z);
        let ls = tape.slice(zp, 1, self.cfg.d_z, self.cfg.d_z);
        let z = reparameterize_on(tape, mu, ls, z_noise);
        // The adversary minimizes this cross-entropy; the reversal hands the
        // continuous encoder the maximizing gradient in the same pass.
        let z_rev = tape.grad_reverse(z, self.cfg.adversary_scale);
        let t_logits = self.adv.forward(tape, &bz, "adv", z_rev);
        cross_entropy_on(tape, t_logits, y)
    }

    /// Adversarial independence loss: cross-entropy of the auxiliary
    /// classifier on z against the class labels. Gradients are absorbed into
    /// zeta (descent) and theta1 (ascent, via the reversal).
    pub fn loss_independence(
        &mut self,
        batch: &LabeledBatch,
        noise: &NoiseBundle,
    ) -> Result<f64, ModelError> {
        self.check_batch(&batch.x, Some(&batch.y), &batch.d)?;
        if self.cfg.mode == TrainingMode::Unsupervised {
            return Err(ModelError::WrongMode { op: "loss_independence" });
        }
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let ce = self.build_independence(&mut tape, &mut bounds, &batch.x, &batch.y, &noise.z);
        tape.backward(ce);
        self.absorb(&tape, &bounds);
        Ok(tape.item(ce))
    }

    /// Value-only independence loss.
    pub fn loss_independence_value(
        &self,
        batch: &LabeledBatch,
        noise: &NoiseBundle,
    ) -> Result<f64, ModelError> {
        self.check_batch(&batch.x, Some(&batch.y), &batch.d)?;
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let ce = self.build_independence(&mut tape, &mut bounds, &batch.x, &batch.y, &noise.z);
        Ok(tape.item(ce))
    }

    // ---- semi-supervised objective ------------------------------------------

    fn build_semi(
        &self,
        tape: &mut Tape,
        bounds: &mut GraphBounds,
        labeled: &LabeledBatch,
        unlabeled: Option<&UnlabeledBatch>,
        noise: &NoiseBundle,
    ) -> (ElboIds, Option<ElboIds>, ValueId) {
        // Labeled branch: s is the label one-hot, no s-inference, no KL_s;
        // both cross-entropy heads train on labeled data.
        let lab = self.build_elbo(
            tape,
            bounds,
            &labeled.x,
            Some(&labeled.y),
            &labeled.d,
            &noise.z,
            None,
            &SDecodeSource::LabelOneHot,
            false,
            true,
        );
        let lab_total = self.combine(tape, &lab);
        match unlabeled {
            Some(u) if u.x.shape()[0] > 0 => {
                let unl = self.build_elbo(
                    tape,
                    bounds,
                    &u.x,
                    None,
                    &u.d,
                    noise.unlabeled_z.as_ref().expect("unlabeled z noise"),
                    noise.unlabeled_gumbel.as_ref(),
                    &SDecodeSource::Relaxed,
                    true,
                    false,
                );
                let unl_total = self.combine(tape, &unl);
                let scaled = tape.scale(unl_total, self.cfg.a);
                let total = tape.add(lab_total, scaled);
                (lab, Some(unl), total)
            }
            _ => (lab, None, lab_total),
        }
    }

    /// Semi-supervised objective: labeled branch plus `a` times the
    /// unlabeled branch. The unlabeled batch may be empty.
    pub fn loss_semi(
        &mut self,
        labeled: &LabeledBatch,
        unlabeled: Option<&UnlabeledBatch>,
        noise: &NoiseBundle,
    ) -> Result<StudentLosses, ModelError> {
        if labeled.x.shape()[0] == 0 {
            return Err(ModelError::EmptyLabeledBatch);
        }
        self.check_batch(&labeled.x, Some(&labeled.y), &labeled.d)?;
        if let Some(u) = unlabeled {
            if u.x.shape()[0] > 0 {
                self.check_batch(&u.x, None, &u.d)?;
            }
        }
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let (lab, unl, total) = self.build_semi(&mut tape, &mut bounds, labeled, unlabeled, noise);
        tape.backward(total);
        self.absorb(&tape, &bounds);
        Ok(self.semi_losses(&tape, &lab, unl.as_ref(), total))
    }

    /// Value-only semi-supervised objective.
    pub fn loss_semi_value(
        &self,
        labeled: &LabeledBatch,
        unlabeled: Option<&UnlabeledBatch>,
        noise: &NoiseBundle,
    ) -> Result<StudentLosses, ModelError> {
        if labeled.x.shape()[0] == 0 {
            return Err(ModelError::EmptyLabeledBatch);
        }
        self.check_batch(&labeled.x, Some(&labeled.y), &labeled.d)?;
        if let Some(u) = unlabeled {
            if u.x.shape()[0] > 0 {
                self.check_batch(&u.x, None, &u.d)?;
            }
        }
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let (lab, unl, total) = self.build_semi(&mut tape, &mut bounds, labeled, unlabeled, noise);
        Ok(self.semi_losses(&tape, &lab, unl.as_ref(), total))
    }

    fn semi_losses(
        &self,
        tape: &Tape,
        lab: &ElboIds,
        unl: Option<&ElboIds>,
        total: ValueId,
    ) -> StudentLosses {
        let mut out = self.losses_from(tape, lab, total);
        if let Some(u) = unl {
            out.recon += self.cfg.a * tape.item(u.recon);
            out.kl_z += self.cfg.a * tape.item(u.kl_z);
            out.kl_delta += self.cfg.a * tape.item(u.kl_delta);
            out.kl_s += self.cfg.a * u.kl_s.map(|id| tape.item(id)).unwrap_or(0.0);
        }
        out
    }

    // ---- unsupervised objective ----------------------------------------------

    fn build_unsupervised(
        &self,
        tape: &mut Tape,
        bounds: &mut GraphBounds,
        batch: &UnlabeledBatch,
        noise: &NoiseBundle,
    ) -> (ElboIds, ValueId) {
        // Two encoders only: the class path is replaced by a fixed uniform
        // vector in the decoder; the domain head still trains on task labels.
        let uniform = vec![1.0 / self.cfg.l_m as f64; self.cfg.l_m];
        let ids = self.build_elbo(
            tape,
            bounds,
            &batch.x,
            None,
            &batch.d,
            &noise.z,
            None,
            &SDecodeSource::Fixed(uniform),
            false,
            true,
        );
        let total = self.combine(tape, &ids);
        (ids, total)
    }

    /// Unsupervised objective: reconstruction + beta1 KL_z + beta2 KL_delta
    /// plus the domain head (task identities are known from the task order).
    pub fn loss_unsupervised(
        &mut self,
        batch: &UnlabeledBatch,
        noise: &NoiseBundle,
    ) -> Result<StudentLosses, ModelError> {
        self.check_batch(&batch.x, None, &batch.d)?;
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let (ids, total) = self.build_unsupervised(&mut tape, &mut bounds, batch, noise);
        tape.backward(total);
        self.absorb(&tape, &bounds);
        Ok(self.losses_from(&tape, &ids, total))
    }

    /// Value-only unsupervised objective.
    pub fn loss_unsupervised_value(
        &self,
        batch: &UnlabeledBatch,
        noise: &NoiseBundle,
    ) -> Result<StudentLosses, ModelError> {
        self.check_batch(&batch.x, None, &batch.d)?;
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let (ids, total) = self.build_unsupervised(&mut tape, &mut bounds, batch, noise);
        Ok(self.losses_from(&tape, &ids, total))
    }

    // ---- training steps ---------------------------------------------------

    /// One optimizer step of the mode's objective (plus the adversarial
    /// independence loss in the class-aware modes) on a labeled batch.
    pub fn train_step(
        &mut self,
        labeled: &LabeledBatch,
        unlabeled: Option<&UnlabeledBatch>,
        rng: &mut Rng,
        lr: f64,
    ) -> Result<StudentLosses, ModelError> {
        let n = labeled.x.shape()[0];
        match self.cfg.mode {
            TrainingMode::Supervised => {
                let noise = NoiseBundle::for_supervised(n, self.cfg.d_z, self.cfg.l_m, rng);
                let mut losses = self.loss_supervised(labeled, &noise)?;
                losses.independence = self.loss_independence(labeled, &noise)?;
                self.step_stores(&[
                    StoreKind::Theta1,
                    StoreKind::Theta2,
                    StoreKind::Theta3,
                    StoreKind::Omega,
                    StoreKind::Zeta,
                ], lr);
                Ok(losses)
            }
            TrainingMode::SemiSupervised => {
                let nu = unlabeled.map(|u| u.x.shape()[0]).unwrap_or(0);
                let noise = NoiseBundle::for_semi(n, nu, self.cfg.d_z, self.cfg.l_m, rng);
                let mut losses = self.loss_semi(labeled, unlabeled, &noise)?;
                losses.independence = self.loss_independence(labeled, &noise)?;
                self.step_stores(&[
                    StoreKind::Theta1,
                    StoreKind::Theta2,
                    StoreKind::Theta3,
                    StoreKind::Omega,
                    StoreKind::Zeta,
                ], lr);
                Ok(losses)
            }
            TrainingMode::Unsupervised => {
                let batch = UnlabeledBatch { x: labeled.x.clone(), d: labeled.d.clone() };
                self.train_step_unsupervised(&batch, rng, lr)
            }
        }
    }

    /// One optimizer step of the unsupervised objective (two encoders and
    /// the decoder; the class encoder and adversary stay untouched).
    pub fn train_step_unsupervised(
        &mut self,
        batch: &UnlabeledBatch,
        rng: &mut Rng,
        lr: f64,
    ) -> Result<StudentLosses, ModelError> {
        let n = batch.x.shape()[0];
        let noise = NoiseBundle::for_unsupervised(n, self.cfg.d_z, rng);
        let losses = self.loss_unsupervised(batch, &noise)?;
        self.step_stores(&[StoreKind::Theta1, StoreKind::Theta2, StoreKind::Omega], lr);
        Ok(losses)
    }

    fn step_stores(&mut self, kinds: &[StoreKind], lr: f64) {
        for &kind in kinds {
            let store = self.store_mut(kind);
            // A branch may legitimately skip part of a store (never here, but
            // zero-filling keeps the step total).
            store.zero_fill_missing_grads();
            store.adam_step_default(lr).expect("gradients populated");
        }
        for &kind in ALL_STORES.iter() {
            self.store_mut(kind).clear_grads();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use diffcore::check_store_gradients;

    fn toy_config() -> StudentConfig {
        let mut cfg = StudentConfig::new(vec![2], 2, 2, 2);
        cfg.arch = Arch::Mlp { hidden: 4 };
        cfg.beta1 = 1.0;
        cfg.beta2 = 0.5;
        cfg.beta3 = 0.5;
        cfg.temperature = 1.0;
        cfg
    }

    fn toy_batch() -> LabeledBatch {
        LabeledBatch {
            x: Tensor::new(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]),
            y: vec![0, 1, 0],
            d: vec![0, 1, 1],
        }
    }

    /// Bounded gumbel noise keeps relaxed samples away from simplex corners
    /// so the finite-difference oracle stays well conditioned.
    fn tame_noise(n: usize, cfg: &StudentConfig, rng: &mut Rng) -> NoiseBundle {
        NoiseBundle {
            z: Tensor::new(vec![n, cfg.d_z], rng.normal_vec(n * cfg.d_z)),
            gumbel: Some(Tensor::new(
                vec![n, cfg.l_m],
                (0..n * cfg.l_m).map(|_| rng.uniform_in(-1.0, 1.5)).collect(),
            )),
            unlabeled_z: None,
            unlabeled_gumbel: None,
        }
    }

    #[test]
    fn infer_outputs_are_simplex_and_deterministic() {
        let mut rng = Rng::new(3);
        let model = StudentModel::new(toy_config(), &mut rng);
        let batch = toy_batch();
        let post = model.infer_batch(&batch.x);
        for row in post.delta_probs.data().chunks(2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        for row in post.s_probs.data().chunks(2) {
            let s: f64 = row.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        let again = model.infer_batch(&batch.x);
        assert!(post
            .mu
            .data()
            .iter()
            .zip(again.mu.data())
            .all(|(a, b)| a.to_bits() == b.to_bits()));

        // Zero input on a fresh model stays finite.
        let zero = Tensor::new(vec![1, 2], vec![0.0, 0.0]);
        let b = model.infer_batch(&zero);
        assert!(b.mu.is_finite() && b.log_sigma.is_finite());
    }

    #[test]
    fn decode_stays_in_unit_interval() {
        let mut rng = Rng::new(5);
        let model = StudentModel::new(toy_config(), &mut rng);
        let img = model.decode(&[0.0, 0.0], &[0.5, 0.5], &[1.0, 0.0]);
        assert_eq!(img.shape(), &[2]);
        assert!(img.data().iter().all(|v| *v > 0.0 && *v < 1.0));
    }

    #[test]
    fn supervised_loss_gradients_pass_finite_differences() {
        let mut rng = Rng::new(11);
        let mut model = StudentModel::new(toy_config(), &mut rng);
        let batch = toy_batch();
        let noise = tame_noise(3, model.config(), &mut rng);
        let _ = model.loss_supervised(&batch, &noise).unwrap();
        for kind in [StoreKind::Theta1, StoreKind::Theta2, StoreKind::Theta3, StoreKind::Omega] {
            let store = model.store(kind).clone();
            let base = model.clone();
            let report = check_store_gradients(
                &store,
                |s| {
                    let mut m = base.clone();
                    *m.store_mut(kind) = s.clone();
                    m.loss_supervised_value(&batch, &noise).unwrap().total
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(
                report.passed(),
                "{:?}: rel err {} at {}[{}]",
                kind,
                report.max_rel_err,
                report.worst_tensor,
                report.worst_coordinate
            );
        }
    }

    #[test]
    fn beta_zero_reduces_to_recon_plus_heads() {
        let mut rng = Rng::new(13);
        let mut cfg = toy_config();
        cfg.beta1 = 0.0;
        cfg.beta2 = 0.0;
        cfg.beta3 = 0.0;
        let model = StudentModel::new(cfg, &mut rng);
        let batch = toy_batch();
        let noise = tame_noise(3, model.config(), &mut rng);
        let l = model.loss_supervised_value(&batch, &noise).unwrap();
        assert!((l.total - (l.recon + l.ce_s + l.ce_delta)).abs() < 1e-12);
    }

    #[test]
    fn independence_loss_reversal_signs() {
        let mut rng = Rng::new(17);
        let mut model = StudentModel::new(toy_config(), &mut rng);
        let batch = toy_batch();
        let noise = tame_noise(3, model.config(), &mut rng);
        let ce = model.loss_independence(&batch, &noise).unwrap();
        assert!(ce.is_finite() && ce > 0.0);
        // zeta sees the descent direction: FD on the zeta store must match.
        let store = model.zeta.clone();
        let base = model.clone();
        let report = check_store_gradients(
            &store,
            |s| {
                let mut m = base.clone();
                m.zeta = s.clone();
                m.loss_independence_value(&batch, &noise).unwrap()
            },
            1e-5,
            1e-4,
        )
        .unwrap();
        assert!(report.passed(), "zeta rel err {}", report.max_rel_err);

        // theta1 receives the negated gradient: the tape value must equal
        // -adversary_scale times the finite difference of the cross-entropy.
        let t1 = model.theta1.clone();
        let fd_name = t1.names().next().unwrap().to_string();
        let fd_grad = {
            let base = model.clone();
            let mut probe = t1.clone();
            let eps = 1e-5;
            let orig = probe.get(&fd_name).data()[0];
            probe.get_mut(&fd_name).data_mut()[0] = orig + eps;
            let mut m = base.clone();
            m.theta1 = probe.clone();
            let hi = m.loss_independence_value(&batch, &noise).unwrap();
            probe.get_mut(&fd_name).data_mut()[0] = orig - eps;
            let mut m = base.clone();
            m.theta1 = probe;
            let lo = m.loss_independence_value(&batch, &noise).unwrap();
            (hi - lo) / (2.0 * eps)
        };
        let tape_grad = model.theta1.get(&fd_name).grad().unwrap()[0];
        let scale = model.config().adversary_scale;
        assert!(
            (tape_grad + scale * fd_grad).abs() <= 1e-6 * (1.0f64).max(fd_grad.abs()),
            "reversal: tape {} vs -scale*fd {}",
            tape_grad,
            -scale * fd_grad
        );
    }

    #[test]
    fn uniform_adversary_gives_log_lm() {
        let mut rng = Rng::new(19);
        let mut model = StudentModel::new(toy_config(), &mut rng);
        // Zero the adversary output layer: logits become constant, so the
        // cross-entropy is exactly ln(L_m).
        for name in ["adv.w1", "adv.b1"] {
            for v in model.zeta.get_mut(name).data_mut() {
                *v = 0.0;
            }
        }
        let batch = toy_batch();
        let noise = tame_noise(3, model.config(), &mut rng);
        let ce = model.loss_independence_value(&batch, &noise).unwrap();
        assert!((ce - (2.0f64).ln()).abs() < 1e-12, "ce {}", ce);
    }

    #[test]
    fn semi_reduces_to_labeled_only() {
        let mut rng = Rng::new(23);
        let mut cfg = toy_config();
        cfg.mode = TrainingMode::SemiSupervised;
        let model = StudentModel::new(cfg, &mut rng);
        let labeled = toy_batch();
        let unl = UnlabeledBatch {
            x: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]),
            d: vec![0, 1],
        };
        let mut noise = NoiseBundle::for_semi(3, 2, 2, 2, &mut rng);

        // a = 0 collapses to the labeled branch even with unlabeled data.
        let mut m0 = model.clone();
        m0.cfg.a = 0.0;
        let with_unl = m0.loss_semi_value(&labeled, Some(&unl), &noise).unwrap();
        let lab_only = m0.loss_semi_value(&labeled, None, &noise).unwrap();
        assert!((with_unl.total - lab_only.total).abs() < 1e-12);

        // Empty unlabeled batch collapses regardless of a.
        noise.unlabeled_z = None;
        noise.unlabeled_gumbel = None;
        let m1 = model.clone();
        let empty = UnlabeledBatch { x: Tensor::new(vec![0, 2], vec![]), d: vec![] };
        let a = m1.loss_semi_value(&labeled, Some(&empty), &noise).unwrap();
        let b = m1.loss_semi_value(&labeled, None, &noise).unwrap();
        assert_eq!(a.total, b.total);
    }

    #[test]
    fn semi_gradients_pass_finite_differences() {
        let mut rng = Rng::new(29);
        let mut cfg = toy_config();
        cfg.mode = TrainingMode::SemiSupervised;
        let mut model = StudentModel::new(cfg, &mut rng);
        let labeled = toy_batch();
        let unl = UnlabeledBatch {
            x: Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 0.0]),
            d: vec![0, 1],
        };
        let noise = NoiseBundle {
            z: Tensor::new(vec![3, 2], rng.normal_vec(6)),
            gumbel: None,
            unlabeled_z: Some(Tensor::new(vec![2, 2], rng.normal_vec(4))),
            unlabeled_gumbel: Some(Tensor::new(
                vec![2, 2],
                (0..4).map(|_| rng.uniform_in(-1.0, 1.5)).collect(),
            )),
        };
        let _ = model.loss_semi(&labeled, Some(&unl), &noise).unwrap();
        for kind in [StoreKind::Theta1, StoreKind::Theta2, StoreKind::Theta3, StoreKind::Omega] {
            let store = model.store(kind).clone();
            let base = model.clone();
            let report = check_store_gradients(
                &store,
                |s| {
                    let mut m = base.clone();
                    *m.store_mut(kind) = s.clone();
                    m.loss_semi_value(&labeled, Some(&unl), &noise).unwrap().total
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{:?}: rel err {}", kind, report.max_rel_err);
        }
    }

    #[test]
    fn unsupervised_gradients_and_beta_weighting() {
        let mut rng = Rng::new(31);
        let mut cfg = toy_config();
        cfg.mode = TrainingMode::Unsupervised;
        let mut model = StudentModel::new(cfg, &mut rng);
        let batch = UnlabeledBatch {
            x: Tensor::new(vec![3, 2], vec![0.0, 1.0, 1.0, 0.0, 1.0, 1.0]),
            d: vec![0, 1, 1],
        };
        let noise = NoiseBundle::for_unsupervised(3, 2, &mut rng);
        let _ = model.loss_unsupervised(&batch, &noise).unwrap();
        for kind in [StoreKind::Theta1, StoreKind::Theta2, StoreKind::Omega] {
            let store = model.store(kind).clone();
            let base = model.clone();
            let report = check_store_gradients(
                &store,
                |s| {
                    let mut m = base.clone();
                    *m.store_mut(kind) = s.clone();
                    m.loss_unsupervised_value(&batch, &noise).unwrap().total
                },
                1e-5,
                1e-4,
            )
            .unwrap();
            assert!(report.passed(), "{:?}: rel err {}", kind, report.max_rel_err);
        }

        // Raising beta1 raises the kl_z share of the total, parameters fixed.
        let l1 = model.loss_unsupervised_value(&batch, &noise).unwrap();
        let mut m4 = model.clone();
        m4.cfg.beta1 = 4.0;
        let l4 = m4.loss_unsupervised_value(&batch, &noise).unwrap();
        assert!((l4.total - l1.total - 3.0 * l1.kl_z).abs() < 1e-9);
    }

    #[test]
    fn unsupervised_equals_supervised_with_constant_s_and_beta3_zero() {
        let mut rng = Rng::new(37);
        let cfg = toy_config();
        let model = StudentModel::new(cfg, &mut rng);
        let batch = toy_batch();
        let noise = NoiseBundle::for_unsupervised(3, 2, &mut rng);
        let ub = UnlabeledBatch { x: batch.x.clone(), d: batch.d.clone() };
        let unsup = model.loss_unsupervised_value(&ub, &noise).unwrap();
        // Same graph assembled through the supervised builder with beta3 = 0,
        // a fixed uniform s slot and no class head.
        let mut tape = Tape::new();
        let mut bounds = GraphBounds::new();
        let uniform = vec![0.5, 0.5];
        let ids = model.build_elbo(
            &mut tape,
            &mut bounds,
            &batch.x,
            None,
            &batch.d,
            &noise.z,
            None,
            &SDecodeSource::Fixed(uniform),
            false,
            true,
        );
        let total = model.combine(&mut tape, &ids);
        assert_eq!(unsup.total, tape.item(total));
    }

    #[test]
    fn mode_consistency_supervised_forced_onehot_equals_semi_labeled_branch() {
        // With beta3 = 0 (removing the class KL, which the labeled branch
        // never has) the two graphs are the same function.
        let mut rng = Rng::new(41);
        let mut cfg = toy_config();
        cfg.beta3 = 0.0;
        cfg.mode = TrainingMode::SemiSupervised;
        let model = StudentModel::new(cfg, &mut rng);
        let batch = toy_batch();
        let noise = NoiseBundle::for_semi(3, 0, 2, 2, &mut rng);
        let forced = model.loss_supervised_forced_onehot_value(&batch, &noise, false).unwrap();
        let semi = model.loss_semi_value(&batch, None, &noise).unwrap();
        assert_eq!(forced.total, semi.total);
    }

    #[test]
    fn classify_rules() {
        let mut rng = Rng::new(43);
        let model = StudentModel::new(toy_config(), &mut rng);
        assert_eq!(argmax(&[0.1, 0.8, 0.1]), 1);
        assert_eq!(argmax(&[0.5, 0.5]), 0);
        let x = Tensor::vector(&[1.0, 0.0]);
        let c = model.classify(&x).unwrap();
        assert!(c < 2);

        let mut cfg = toy_config();
        cfg.mode = TrainingMode::Unsupervised;
        let m2 = StudentModel::new(cfg, &mut rng);
        assert!(matches!(m2.classify(&x), Err(ModelError::WrongMode { .. })));
    }

    #[test]
    fn invalid_labels_are_rejected() {
        let mut rng = Rng::new(47);
        let mut model = StudentModel::new(toy_config(), &mut rng);
        let mut batch = toy_batch();
        batch.y[1] = 9;
        let noise = tame_noise(3, model.config(), &mut rng);
        assert!(matches!(
            model.loss_supervised(&batch, &noise),
            Err(ModelError::InvalidLabel { index: 9, bound: 2 })
        ));
        let mut batch = toy_batch();
        batch.d[0] = 5;
        assert!(matches!(
            model.loss_supervised(&batch, &noise),
            Err(ModelError::InvalidDomain { index: 5, bound: 2 })
        ));
    }

    #[test]
    fn train_step_moves_parameters_deterministically() {
        let mut rng_a = Rng::new(53);
        let mut model_a = StudentModel::new(toy_config(), &mut rng_a);
        let mut rng_b = Rng::new(53);
        let mut model_b = StudentModel::new(toy_config(), &mut rng_b);
        let batch = toy_batch();
        let la = model_a.train_step(&batch, None, &mut rng_a, 1e-3).unwrap();
        let lb = model_b.train_step(&batch, None, &mut rng_b, 1e-3).unwrap();
        assert_eq!(la.total.to_bits(), lb.total.to_bits());
        for (na, nb) in model_a.theta1.entries().zip(model_b.theta1.entries()) {
            assert_eq!(na.1.data(), nb.1.data());
        }
        // Parameters actually moved.
        let fresh = StudentModel::new(toy_config(), &mut Rng::new(53));
        let moved = model_a
            .theta1
            .entries()
            .zip(fresh.theta1.entries())
            .any(|((_, a), (_, b))| a.data() != b.data());
        assert!(moved);
    }

    #[test]
    fn overfit_single_sample_reconstructs_it() {
        let mut rng = Rng::new(59);
        let mut cfg = toy_config();
        cfg.beta1 = 0.1;
        cfg.beta2 = 0.01;
        cfg.beta3 = 0.01;
        let mut model = StudentModel::new(cfg, &mut rng);
        let batch = LabeledBatch {
            x: Tensor::new(vec![1, 2], vec![1.0, 0.0]),
            y: vec![0],
            d: vec![0],
        };
        for _ in 0..800 {
            model.train_step(&batch, None, &mut rng, 5e-3).unwrap();
        }
        let bundle = model.infer(&Tensor::vector(&[1.0, 0.0]));
        let recon = model.decode(
            bundle.z_post.mu.data(),
            &bundle.s_probs,
            &crate::latents::one_hot(0, 2),
        );
        for (r, t) in recon.data().iter().zip(&[1.0, 0.0]) {
            assert!((r - t).abs() < 0.05, "recon {:?}", recon.data());
        }
    }
}
