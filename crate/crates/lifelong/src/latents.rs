//! Probability primitives: Gaussian reparameterization, Gumbel-softmax
//! sampling, closed-form KL divergences, and the domain-conditional prior.
//!
//! Every operation exists in two forms: a pure function over plain tensors
//! (used by oracles and evaluation) and a tape composition (used by training
//! losses). Tests pin the two against each other.

use diffcore::{Tape, Tensor, ValueId};

/// Diagonal Gaussian posterior, parameterized by mean and log standard
/// deviation so sigma is positive by construction.
#[derive(Debug, Clone)]
pub struct GaussianPosterior {
    pub mu: Tensor,
    pub log_sigma: Tensor,
}

impl GaussianPosterior {
    pub fn new(mu: Tensor, log_sigma: Tensor) -> Self {
        assert_eq!(
            mu.shape(),
            log_sigma.shape(),
            "mu shape {:?} != log_sigma shape {:?}",
            mu.shape(),
            log_sigma.shape()
        );
        GaussianPosterior { mu, log_sigma }
    }

    pub fn dim(&self) -> usize {
        self.mu.numel()
    }
}

/// Domain-conditional Gaussian prior: row `i` of `mean_table` is the mean
/// assigned to domain `i`; shared isotropic `sigma_prior`.
#[derive(Debug, Clone)]
pub struct ConditionalPrior {
    mean_table: Tensor,
    sigma_prior: f64,
}

impl ConditionalPrior {
    pub fn new(mean_table: Tensor, sigma_prior: f64) -> Self {
        assert!(sigma_prior > 0.0, "sigma_prior must be positive");
        assert_eq!(mean_table.shape().len(), 2, "mean table must be [domains, d_z]");
        let rows = mean_table.shape()[0];
        let d = mean_table.shape()[1];
        for i in 0..rows {
            for j in (i + 1)..rows {
                let a = &mean_table.data()[i * d..(i + 1) * d];
                let b = &mean_table.data()[j * d..(j + 1) * d];
                assert!(a != b, "prior mean rows {} and {} coincide", i, j);
            }
        }
        ConditionalPrior { mean_table, sigma_prior }
    }

    /// Fixed well-separated table with sigma_prior = 1: domain `i` maps to
    /// `spacing * e_(i mod d_z)`, scaled up each time the basis wraps so rows
    /// stay pairwise distinct even with more domains than latent dimensions.
    pub fn well_separated(domains: usize, d_z: usize, spacing: f64) -> Self {
        assert!(domains >= 1 && d_z >= 1);
        assert!(spacing > 0.0);
        let mut data = vec![0.0; domains * d_z];
        for i in 0..domains {
            let axis = i % d_z;
            let level = (i / d_z + 1) as f64;
            data[i * d_z + axis] = spacing * level;
        }
        ConditionalPrior::new(Tensor::new(vec![domains, d_z], data), 1.0)
    }

    pub fn with_sigma_prior(mut self, sigma: f64) -> Self {
        assert!(sigma > 0.0, "sigma_prior must be positive");
        self.sigma_prior = sigma;
        self
    }

    pub fn domains(&self) -> usize {
        self.mean_table.shape()[0]
    }

    pub fn d_z(&self) -> usize {
        self.mean_table.shape()[1]
    }

    pub fn sigma_prior(&self) -> f64 {
        self.sigma_prior
    }

    pub fn mean_row(&self, domain_index: usize) -> &[f64] {
        assert!(
            domain_index < self.domains(),
            "domain index {} out of {} rows",
            domain_index,
            self.domains()
        );
        let d = self.d_z();
        &self.mean_table.data()[domain_index * d..(domain_index + 1) * d]
    }

    /// Table rows gathered by per-sample domain labels, as a [n, d_z] tensor.
    pub fn gather_rows(&self, domains: &[usize]) -> Tensor {
        let d = self.d_z();
        let mut data = Vec::with_capacity(domains.len() * d);
        for &di in domains {
            data.extend_from_slice(self.mean_row(di));
        }
        Tensor::new(vec![domains.len(), d], data)
    }
}

/// Categorical prior over task identities.
#[derive(Debug, Clone)]
pub struct DomainPrior {
    weights: Vec<f64>,
}

impl DomainPrior {
    pub fn new(weights: Vec<f64>) -> Self {
        assert!(!weights.is_empty(), "domain prior must not be empty");
        assert!(weights.iter().all(|w| *w >= 0.0), "domain prior weights must be nonnegative");
        let sum: f64 = weights.iter().sum();
        assert!((sum - 1.0).abs() <= 1e-12, "domain prior sums to {}, not 1", sum);
        DomainPrior { weights }
    }

    pub fn uniform(k: usize) -> Self {
        assert!(k >= 1);
        DomainPrior::new(vec![1.0 / k as f64; k])
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.weights.len()
    }
}

/// Gumbel-softmax distribution: logits plus a relaxation temperature.
#[derive(Debug, Clone)]
pub struct RelaxedCategorical {
    pub logits: Tensor,
    pub temperature: f64,
}

impl RelaxedCategorical {
    pub fn new(logits: Tensor, temperature: f64) -> Self {
        assert!(temperature > 0.0, "temperature must be positive, got {}", temperature);
        RelaxedCategorical { logits, temperature }
    }
}

// ---- pure operations ---------------------------------------------------

/// z = mu + exp(log_sigma) * noise.
pub fn gaussian_reparameterize(post: &GaussianPosterior, noise: &Tensor) -> Tensor {
    assert_eq!(
        noise.shape(),
        post.mu.shape(),
        "noise shape {:?} != mu shape {:?}",
        noise.shape(),
        post.mu.shape()
    );
    let data: Vec<f64> = post
        .mu
        .data()
        .iter()
        .zip(post.log_sigma.data())
        .zip(noise.data())
        .map(|((m, ls), n)| m + ls.exp() * n)
        .collect();
    Tensor::new(post.mu.shape().to_vec(), data)
}

/// KL( N(mu, sigma^2) || N(0, I) ) = 1/2 sum(mu^2 + sigma^2 - 1 - 2 log sigma).
pub fn kl_gaussian_vs_standard(post: &GaussianPosterior) -> f64 {
    post.mu
        .data()
        .iter()
        .zip(post.log_sigma.data())
        .map(|(m, ls)| {
            let s2 = (2.0 * ls).exp();
            0.5 * (m * m + s2 - 1.0 - 2.0 * ls)
        })
        .sum()
}

/// KL( N(mu, sigma^2) || N(mean_row(domain), sigma_prior^2 I) ).
pub fn kl_gaussian_vs_conditional(
    post: &GaussianPosterior,
    prior: &ConditionalPrior,
    domain_index: usize,
) -> f64 {
    let m_row = prior.mean_row(domain_index);
    assert_eq!(post.dim(), m_row.len(), "posterior dim {} != prior d_z {}", post.dim(), m_row.len());
    let sp = prior.sigma_prior();
    let sp2 = sp * sp;
    post.mu
        .data()
        .iter()
        .zip(post.log_sigma.data())
        .zip(m_row)
        .map(|((mu, ls), m)| {
            let s2 = (2.0 * ls).exp();
            0.5 * ((mu - m) * (mu - m) / sp2 + s2 / sp2 - 1.0 - 2.0 * (ls - sp.ln()))
        })
        .sum()
}

/// Gumbel-softmax sample with max-subtraction:
/// s_j = exp((logits_j + g_j)/T - max) / sum_i exp((logits_i + g_i)/T - max).
pub fn gumbel_softmax_sample(rc: &RelaxedCategorical, gumbel_noise: &Tensor) -> Tensor {
    assert_eq!(
        gumbel_noise.numel(),
        rc.logits.numel(),
        "gumbel noise length {} != logits length {}",
        gumbel_noise.numel(),
        rc.logits.numel()
    );
    let scaled: Vec<f64> = rc
        .logits
        .data()
        .iter()
        .zip(gumbel_noise.data())
        .map(|(l, g)| (l + g) / rc.temperature)
        .collect();
    let max = scaled.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = scaled.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    Tensor::new(rc.logits.shape().to_vec(), exps.iter().map(|e| e / z).collect())
}

/// KL(q || p) = sum q_i ln(q_i / p_i), with 0 ln 0 = 0. Returns +inf when
/// p has a zero where q is positive.
pub fn kl_categorical(q: &[f64], p: &[f64]) -> f64 {
    assert_eq!(q.len(), p.len(), "simplex length mismatch {} vs {}", q.len(), p.len());
    let mut kl = 0.0;
    for (qi, pi) in q.iter().zip(p) {
        if *qi == 0.0 {
            continue;
        }
        if *pi == 0.0 {
            return f64::INFINITY;
        }
        kl += qi * (qi / pi).ln();
    }
    kl
}

/// Inverse-CDF draw from the domain prior; returns a one-hot vector.
pub fn sample_domain_prior(prior: &DomainPrior, u: f64) -> Vec<f64> {
    assert!((0.0..1.0).contains(&u), "u must lie in [0, 1), got {}", u);
    let mut cum = 0.0;
    let mut index = prior.len() - 1;
    for (i, w) in prior.weights().iter().enumerate() {
        cum += w;
        if u < cum {
            index = i;
            break;
        }
    }
    let mut onehot = vec![0.0; prior.len()];
    onehot[index] = 1.0;
    onehot
}

pub fn one_hot(index: usize, len: usize) -> Vec<f64> {
    assert!(index < len, "one_hot index {} out of {}", index, len);
    let mut v = vec![0.0; len];
    v[index] = 1.0;
    v
}

pub fn argmax(values: &[f64]) -> usize {
    assert!(!values.is_empty());
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

// ---- tape compositions ---------------------------------------------------

/// Batched reparameterization on the tape: `mu`, `log_sigma`, `noise` all
/// [n, d]; the noise enters as a constant.
pub fn reparameterize_on(tape: &mut Tape, mu: ValueId, log_sigma: ValueId, noise: &Tensor) -> ValueId {
    let n = tape.constant_from(noise);
    let sig = tape.exp(log_sigma);
    let scaled = tape.mul(sig, n);
    tape.add(mu, scaled)
}

/// Batched Gumbel-softmax on the tape: logits [n, L], noise constant [n, L].
pub fn gumbel_softmax_on(
    tape: &mut Tape,
    logits: ValueId,
    gumbel_noise: &Tensor,
    temperature: f64,
) -> ValueId {
    assert!(temperature > 0.0, "temperature must be positive");
    let g = tape.constant_from(gumbel_noise);
    let shifted = tape.add(logits, g);
    let scaled = tape.scale(shifted, 1.0 / temperature);
    tape.softmax(scaled)
}

/// Batch-mean KL against the standard normal; `mu`, `log_sigma` are [n, d].
pub fn kl_gaussian_standard_on(tape: &mut Tape, mu: ValueId, log_sigma: ValueId) -> ValueId {
    let n = tape.shape(mu)[0] as f64;
    let mu2 = tape.mul(mu, mu);
    let two_ls = tape.scale(log_sigma, 2.0);
    let s2 = tape.exp(two_ls);
    let t = tape.add(mu2, s2);
    let t = tape.add_scalar(t, -1.0);
    let t = tape.sub(t, two_ls);
    let total = tape.sum(t);
    tape.scale(total, 0.5 / n)
}

/// Batch-mean KL against per-sample conditional prior means (`prior_means`
/// is a constant [n, d] of table rows gathered by domain label).
pub fn kl_gaussian_conditional_on(
    tape: &mut Tape,
    mu: ValueId,
    log_sigma: ValueId,
    prior_means: &Tensor,
    sigma_prior: f64,
) -> ValueId {
    assert!(sigma_prior > 0.0);
    let n = tape.shape(mu)[0] as f64;
    let m = tape.constant_from(prior_means);
    let diff = tape.sub(mu, m);
    let d2 = tape.mul(diff, diff);
    let two_ls = tape.scale(log_sigma, 2.0);
    let s2 = tape.exp(two_ls);
    let num = tape.add(d2, s2);
    let q = tape.scale(num, 1.0 / (sigma_prior * sigma_prior));
    let q = tape.add_scalar(q, -1.0);
    let q = tape.sub(q, two_ls);
    let q = tape.add_scalar(q, 2.0 * sigma_prior.ln());
    let total = tape.sum(q);
    tape.scale(total, 0.5 / n)
}

/// Batch-mean categorical KL of `probs` [n, L] against a fixed full-support
/// prior vector.
pub fn kl_categorical_on(tape: &mut Tape, probs: ValueId, prior: &[f64]) -> ValueId {
    let shape = tape.shape(probs).to_vec();
    assert_eq!(shape.len(), 2);
    assert_eq!(shape[1], prior.len(), "prior length {} != simplex width {}", prior.len(), shape[1]);
    assert!(prior.iter().all(|p| *p > 0.0), "training prior must have full support");
    let n = shape[0] as f64;
    let logq = tape.log(probs);
    let logp: Vec<f64> = prior.iter().map(|p| p.ln()).collect();
    let logp = tape.constant(vec![shape[1]], logp);
    let logp = tape.broadcast(logp, &shape);
    let diff = tape.sub(logq, logp);
    let w = tape.mul(probs, diff);
    let total = tape.sum(w);
    tape.scale(total, 1.0 / n)
}
