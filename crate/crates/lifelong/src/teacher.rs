//! The WGAN teacher: a domain-conditioned generator, a critic trained on the
//! earth-mover objective, Lipschitz enforcement by weight clipping, and the
//! retention-probability diagnostic.
//!
//! The critic scores the joint of a sample and its domain one-hot, so the
//! objective matches the per-domain conditionals rather than only the
//! pooled marginal; the domain of every real sample in the mixed stream is
//! known (fresh samples carry the current task, replayed samples the domain
//! they were generated under). The critic is a flat MLP regardless of the
//! generator architecture.

use diffcore::{ParamStore, Rng, Tape, Tensor};

use crate::nets::{one_hot_rows, Activation, ConvDecoderSpec, DecoderNet, MlpSpec};
use crate::student::Arch;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LipschitzMode {
    /// Clamp every critic weight into [-clip_value, clip_value] after each
    /// optimizer step.
    Clip { clip_value: f64 },
    /// First-order surrogate of the gradient penalty: penalize the
    /// finite-difference Lipschitz quotient of the critic along a random
    /// direction at random interpolates. The tape is first-order, so the
    /// exact gradient-norm penalty is not expressible.
    Penalty { weight: f64, probe_step: f64 },
}

#[derive(Debug, Clone)]
pub struct TeacherConfig {
    pub input_shape: Vec<usize>,
    pub z_dim: usize,
    pub k_max: usize,
    pub critic_steps: usize,
    pub lipschitz: LipschitzMode,
    pub gen_arch: Arch,
    pub critic_hidden: usize,
    /// Hidden activation of the MLP generator and the critic.
    pub mlp_activation: Activation,
}

impl TeacherConfig {
    pub fn new(input_shape: Vec<usize>, z_dim: usize, k_max: usize) -> Self {
        TeacherConfig {
            input_shape,
            z_dim,
            k_max,
            critic_steps: 5,
            lipschitz: LipschitzMode::Clip { clip_value: 0.01 },
            gen_arch: Arch::Auto,
            critic_hidden: 64,
            mlp_activation: Activation::Relu,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    fn validate(&self) {
        assert!(self.critic_steps >= 1, "critic_steps must be >= 1");
        assert!(self.z_dim >= 1 && self.k_max >= 1 && self.critic_hidden >= 1);
        match self.lipschitz {
            LipschitzMode::Clip { clip_value } => {
                assert!(clip_value > 0.0, "clip_value must be positive")
            }
            LipschitzMode::Penalty { weight, probe_step } => {
                assert!(weight > 0.0 && probe_step > 0.0)
            }
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherModel {
    cfg: TeacherConfig,
    pub psi: ParamStore,
    pub critic: ParamStore,
    gen: DecoderNet,
    critic_net: MlpSpec,
}

/// Frozen copy of the generator at a task boundary.
#[derive(Debug, Clone)]
pub struct TeacherSnapshot {
    psi: ParamStore,
    gen: DecoderNet,
    z_dim: usize,
    k_max: usize,
    input_dim: usize,
    task_count: usize,
}

fn resolve_gen(arch: Arch, input_shape: &[usize], in_dim: usize, act: Activation) -> DecoderNet {
    let flat: usize = input_shape.iter().product();
    match arch {
        Arch::Mlp { hidden } => {
            DecoderNet::Mlp(MlpSpec::new(vec![in_dim, hidden, flat], act))
        }
        Arch::MlpDeep { hidden, layers } => {
            let mut dims = vec![in_dim];
            dims.extend(std::iter::repeat(hidden).take(layers.max(1)));
            dims.push(flat);
            DecoderNet::Mlp(MlpSpec::new(dims, act))
        }
        Arch::Conv { c1, c2 } => DecoderNet::Conv(ConvDecoderSpec {
            out_shape: [input_shape[0], input_shape[1], input_shape[2]],
            c1,
            c2,
            in_dim,
        }),
        Arch::Auto => {
            if input_shape.len() == 3
                && input_shape[1] % 4 == 0
                && input_shape[2] % 4 == 0
                && input_shape[1] >= 8
            {
                resolve_gen(Arch::Conv { c1: 32, c2: 64 }, input_shape, in_dim, act)
            } else {
                resolve_gen(Arch::Mlp { hidden: 64 }, input_shape, in_dim, act)
            }
        }
    }
}

fn generate_with(
    psi: &ParamStore,
    gen: &DecoderNet,
    z_dim: usize,
    k_max: usize,
    z: &Tensor,
    domains: &[usize],
) -> Tensor {
    let n = z.shape()[0];
    assert_eq!(z.shape()[1], z_dim, "z width mismatch");
    assert_eq!(domains.len(), n, "one domain per sample");
    for &d in domains {
        assert!(d < k_max, "domain index {} out of {}", d, k_max);
    }
    let onehot = one_hot_rows(domains, k_max);
    let mut tape = Tape::new();
    let bound = psi.bind(&mut tape);
    let zid = tape.constant_from(z);
    let did = hot_const(&mut tape, &onehot);
    let gin = tape.concat(&[zid, did], 1);
    let logits = gen.forward(&mut tape, &bound, "gen", gin);
    let out = tape.sigmoid(logits);
    tape.tensor(out)
}

fn hot_const(tape: &mut Tape, onehot: &Tensor) -> diffcore::ValueId {
    tape.constant_from(onehot)
}

impl TeacherModel {
    pub fn new(cfg: TeacherConfig, rng: &mut Rng) -> Self {
        cfg.validate();
        let gen = resolve_gen(cfg.gen_arch, &cfg.input_shape, cfg.z_dim + cfg.k_max, cfg.mlp_activation);
        let critic_net = MlpSpec::new(
            vec![cfg.input_dim() + cfg.k_max, cfg.critic_hidden, 1],
            cfg.mlp_activation,
        );
        let mut psi = ParamStore::new();
        gen.init(&mut psi, "gen", rng);
        let mut critic = ParamStore::new();
        critic_net.init(&mut critic, "critic", rng);
        let mut model = TeacherModel { cfg, psi, critic, gen, critic_net };
        // Start inside the admissible set when clipping.
        model.enforce_lipschitz();
        model
    }

    pub fn config(&self) -> &TeacherConfig {
        &self.cfg
    }

    /// Samples in data space for injected z and per-sample domains;
    /// deterministic given (z, domains, psi).
    pub fn generate_batch(&self, z: &Tensor, domains: &[usize]) -> Tensor {
        generate_with(&self.psi, &self.gen, self.cfg.z_dim, self.cfg.k_max, z, domains)
    }

    /// Single sample from one z row and a domain index, shaped like the input.
    pub fn generate(&self, z: &Tensor, domain: usize) -> Tensor {
        let row = Tensor::new(vec![1, z.numel()], z.data().to_vec());
        let out = self.generate_batch(&row, &[domain]);
        Tensor::new(self.cfg.input_shape.clone(), out.data().to_vec())
    }

    /// Draws z ~ N(0, I) and uniform domains from `domains`, then generates.
    pub fn sample(&self, n: usize, domains: &[usize], rng: &mut Rng) -> (Tensor, Vec<usize>) {
        assert!(!domains.is_empty());
        let z = Tensor::new(vec![n, self.cfg.z_dim], rng.normal_vec(n * self.cfg.z_dim));
        let picked: Vec<usize> = (0..n).map(|_| domains[rng.below(domains.len())]).collect();
        (self.generate_batch(&z, &picked), picked)
    }

    fn critic_forward(
        &self,
        tape: &mut Tape,
        bound: &diffcore::BoundParams,
        x: diffcore::ValueId,
        domains: &[usize],
    ) -> diffcore::ValueId {
        let onehot = one_hot_rows(domains, self.cfg.k_max);
        let did = tape.constant_from(&onehot);
        let joint = tape.concat(&[x, did], 1);
        self.critic_net.forward(tape, bound, "critic", joint)
    }

    /// Earth-mover losses on one batch: critic_loss = mean C(fake) - mean
    /// C(real), generator_loss = -mean C(fake). Gradients of the critic loss
    /// are absorbed into the critic store, gradients of the generator loss
    /// into psi.
    pub fn wgan_losses(
        &mut self,
        real: &Tensor,
        real_domains: &[usize],
        z: &Tensor,
        fake_domains: &[usize],
    ) -> (f64, f64) {
        self.wgan_losses_inner(real, real_domains, z, fake_domains, true)
    }

    /// Value-only earth-mover losses.
    pub fn wgan_losses_value(
        &self,
        real: &Tensor,
        real_domains: &[usize],
        z: &Tensor,
        fake_domains: &[usize],
    ) -> (f64, f64) {
        let mut this = self.clone();
        this.wgan_losses_inner(real, real_domains, z, fake_domains, false)
    }

    fn wgan_losses_inner(
        &mut self,
        real: &Tensor,
        real_domains: &[usize],
        z: &Tensor,
        fake_domains: &[usize],
        with_grads: bool,
    ) -> (f64, f64) {
        assert!(real.shape()[0] > 0, "empty real batch");
        assert_eq!(real.shape()[1], self.cfg.input_dim(), "real width mismatch");
        assert_eq!(real_domains.len(), real.shape()[0], "one domain per real sample");
        let mut tape = Tape::new();
        let bp = self.psi.bind(&mut tape);
        let bc = self.critic.bind(&mut tape);
        let onehot = one_hot_rows(fake_domains, self.cfg.k_max);
        let zid = tape.constant_from(z);
        let did = tape.constant_from(&onehot);
        let gin = tape.concat(&[zid, did], 1);
        let fake_logits = self.gen.forward(&mut tape, &bp, "gen", gin);
        let fake = tape.sigmoid(fake_logits);
        let d_fake = {
            let joint = tape.concat(&[fake, did], 1);
            self.critic_net.forward(&mut tape, &bc, "critic", joint)
        };
        let rid = tape.constant_from(real);
        let d_real = self.critic_forward(&mut tape, &bc, rid, real_domains);
        let mean_fake = tape.mean(d_fake);
        let mean_real = tape.mean(d_real);
        let critic_loss = tape.sub(mean_fake, mean_real);
        let gen_loss = tape.neg(mean_fake);
        if with_grads {
            tape.backward(critic_loss);
            self.critic.absorb_grads(&tape, &bc);
            tape.backward(gen_loss);
            self.psi.absorb_grads(&tape, &bp);
        }
        (tape.item(critic_loss), tape.item(gen_loss))
    }

    /// One critic update on a real batch with known per-sample domains:
    /// loss, Adam step, Lipschitz enforcement. Fake domains are drawn
    /// uniformly over `fake_domains`. Returns the critic loss value.
    pub fn critic_step(
        &mut self,
        real: &Tensor,
        real_domains: &[usize],
        fake_domains: &[usize],
        rng: &mut Rng,
        lr: f64,
    ) -> f64 {
        let n = real.shape()[0];
        assert_eq!(real_domains.len(), n);
        let z = Tensor::new(vec![n, self.cfg.z_dim], rng.normal_vec(n * self.cfg.z_dim));
        let picked: Vec<usize> =
            (0..n).map(|_| fake_domains[rng.below(fake_domains.len())]).collect();

        let mut tape = Tape::new();
        let bp = self.psi.bind(&mut tape);
        let bc = self.critic.bind(&mut tape);
        let onehot = one_hot_rows(&picked, self.cfg.k_max);
        let zid = tape.constant_from(&z);
        let did = tape.constant_from(&onehot);
        let gin = tape.concat(&[zid, did], 1);
        let fake_logits = self.gen.forward(&mut tape, &bp, "gen", gin);
        let fake = tape.sigmoid(fake_logits);
        let d_fake = {
            let joint = tape.concat(&[fake, did], 1);
            self.critic_net.forward(&mut tape, &bc, "critic", joint)
        };
        let rid = tape.constant_from(real);
        let d_real = self.critic_forward(&mut tape, &bc, rid, real_domains);
        let mean_fake = tape.mean(d_fake);
        let mean_real = tape.mean(d_real);
        let mut critic_loss = tape.sub(mean_fake, mean_real);

        if let LipschitzMode::Penalty { weight, probe_step } = self.cfg.lipschitz {
            // Interpolates and probe directions are data, not graph nodes:
            // the penalty trains the critic only.
            let fake_vals = tape.value(fake).to_vec();
            let real_hot = one_hot_rows(real_domains, self.cfg.k_max);
            let d = self.cfg.input_dim() + self.cfg.k_max;
            let dx = self.cfg.input_dim();
            let mut interp = vec![0.0; n * d];
            let mut shifted = vec![0.0; n * d];
            for i in 0..n {
                let alpha = rng.uniform();
                let mut dir: Vec<f64> = (0..d).map(|_| rng.normal()).collect();
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                dir.iter_mut().for_each(|v| *v /= norm);
                for j in 0..d {
                    let (rv, fv) = if j < dx {
                        (real.data()[i * dx + j], fake_vals[i * dx + j])
                    } else {
                        (
                            real_hot.data()[i * self.cfg.k_max + (j - dx)],
                            onehot.data()[i * self.cfg.k_max + (j - dx)],
                        )
                    };
                    let base = alpha * rv + (1.0 - alpha) * fv;
                    interp[i * d + j] = base;
                    shifted[i * d + j] = base + probe_step * dir[j];
                }
            }
            let base_t = Tensor::new(vec![n, d], interp);
            let shift_t = Tensor::new(vec![n, d], shifted);
            let b0 = tape.constant_from(&base_t);
            let b1 = tape.constant_from(&shift_t);
            let c0 = self.critic_net.forward(&mut tape, &bc, "critic", b0);
            let c1 = self.critic_net.forward(&mut tape, &bc, "critic", b1);
            let diff = tape.sub(c1, c0);
            let quot = tape.scale(diff, 1.0 / probe_step);
            let qpos = tape.relu(quot);
            let qneg = tape.neg(quot);
            let qneg = tape.relu(qneg);
            let absq = tape.add(qpos, qneg);
            let excess = tape.add_scalar(absq, -1.0);
            let excess = tape.relu(excess);
            let sq = tape.mul(excess, excess);
            let pen = tape.mean(sq);
            let pen = tape.scale(pen, weight);
            critic_loss = tape.add(critic_loss, pen);
        }

        tape.backward(critic_loss);
        self.critic.absorb_grads(&tape, &bc);
        self.psi.clear_grads();
        self.critic.adam_step_default(lr).expect("critic gradients populated");
        self.enforce_lipschitz();
        tape.item(critic_loss)
    }

    /// One generator update; returns the generator loss value.
    pub fn generator_step(&mut self, n: usize, fake_domains: &[usize], rng: &mut Rng, lr: f64) -> f64 {
        let z = Tensor::new(vec![n, self.cfg.z_dim], rng.normal_vec(n * self.cfg.z_dim));
        let picked: Vec<usize> =
            (0..n).map(|_| fake_domains[rng.below(fake_domains.len())]).collect();
        let mut tape = Tape::new();
        let bp = self.psi.bind(&mut tape);
        let bc = self.critic.bind(&mut tape);
        let onehot = one_hot_rows(&picked, self.cfg.k_max);
        let zid = tape.constant_from(&z);
        let did = tape.constant_from(&onehot);
        let gin = tape.concat(&[zid, did], 1);
        let fake_logits = self.gen.forward(&mut tape, &bp, "gen", gin);
        let fake = tape.sigmoid(fake_logits);
        let joint = tape.concat(&[fake, did], 1);
        let d_fake = self.critic_net.forward(&mut tape, &bc, "critic", joint);
        let mean_fake = tape.mean(d_fake);
        let gen_loss = tape.neg(mean_fake);
        tape.backward(gen_loss);
        self.psi.absorb_grads(&tape, &bp);
        self.critic.clear_grads();
        self.psi.adam_step_default(lr).expect("generator gradients populated");
        tape.item(gen_loss)
    }

    /// Clamps critic weights when clipping is active; no-op for the penalty.
    pub fn enforce_lipschitz(&mut self) {
        if let LipschitzMode::Clip { clip_value } = self.cfg.lipschitz {
            self.critic.clamp_all(clip_value);
        }
    }

    /// mean C(real) - mean C(fake): the critic's loss gap, an estimate of
    /// the scaled earth-mover distance.
    pub fn critic_gap(
        &self,
        real: &Tensor,
        real_domains: &[usize],
        fake: &Tensor,
        fake_domains: &[usize],
    ) -> f64 {
        let mut tape = Tape::new();
        let bc = self.critic.bind(&mut tape);
        let rid = tape.constant_from(real);
        let fid = tape.constant_from(fake);
        let dr = self.critic_forward(&mut tape, &bc, rid, real_domains);
        let df = self.critic_forward(&mut tape, &bc, fid, fake_domains);
        let mr = tape.mean(dr);
        let mf = tape.mean(df);
        tape.item(mr) - tape.item(mf)
    }

    /// Immutable generator copy tagged with the number of tasks it has seen.
    pub fn snapshot(&self, task_count: usize) -> TeacherSnapshot {
        TeacherSnapshot {
            psi: self.psi.clone(),
            gen: self.gen.clone(),
            z_dim: self.cfg.z_dim,
            k_max: self.cfg.k_max,
            input_dim: self.cfg.input_dim(),
            task_count,
        }
    }
}

impl TeacherSnapshot {
    pub fn task_count(&self) -> usize {
        self.task_count
    }

    pub fn z_dim(&self) -> usize {
        self.z_dim
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn params(&self) -> &ParamStore {
        &self.psi
    }

    pub fn generate_batch(&self, z: &Tensor, domains: &[usize]) -> Tensor {
        generate_with(&self.psi, &self.gen, self.z_dim, self.k_max, z, domains)
    }

    /// Draws z and uniform domains over `domains`, returning samples and the
    /// domain each was conditioned on.
    pub fn sample(&self, n: usize, domains: &[usize], rng: &mut Rng) -> (Tensor, Vec<usize>) {
        assert!(!domains.is_empty());
        let z = Tensor::new(vec![n, self.z_dim], rng.normal_vec(n * self.z_dim));
        let picked: Vec<usize> = (0..n).map(|_| domains[rng.below(domains.len())]).collect();
        (self.generate_batch(&z, &picked), picked)
    }
}

/// Exact empirical Wasserstein-1 distance in one dimension: mean absolute
/// difference of sorted samples. Both sides must have the same count.
pub fn wasserstein1_1d_oracle(samples_a: &[f64], samples_b: &[f64]) -> f64 {
    assert_eq!(samples_a.len(), samples_b.len(), "sample counts differ");
    assert!(!samples_a.is_empty(), "empty samples");
    let mut a = samples_a.to_vec();
    let mut b = samples_b.to_vec();
    a.sort_by(|x, y| x.partial_cmp(y).unwrap());
    b.sort_by(|x, y| x.partial_cmp(y).unwrap());
    a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

/// Retention probability of replayed knowledge: 1 - min(1, w).
pub fn retention_probability(w: f64) -> f64 {
    assert!(w >= 0.0, "wasserstein value must be nonnegative, got {}", w);
    1.0 - w.min(1.0)
}
