//! Exact, brute-force verification of the framework's analysis on finite
//! instances: empirical risk, discrepancy distance, the single-task and
//! accumulated risk bounds, and the ideal-replay mixture recursion.
//!
//! Everything here enumerates; nothing is sampled or approximated. The
//! single-task bound is proved under the hypothesis that the true labeling
//! function belongs to the hypothesis class, so instance generators always
//! draw the labeling from the class.

use diffcore::Rng;
use serde::Serialize;

use std::fmt;

pub const BOUND_SLACK: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub enum TheoryError {
    EmptyDataset,
    EmptyReportList,
    EmptyTaskList,
    DomainMismatch { left: usize, right: usize },
}

impl fmt::Display for TheoryError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TheoryError::EmptyDataset => write!(f, "empty dataset"),
            TheoryError::EmptyReportList => write!(f, "empty report list"),
            TheoryError::EmptyTaskList => write!(f, "empty task distribution list"),
            TheoryError::DomainMismatch { left, right } => {
                write!(f, "distributions over different point counts: {} vs {}", left, right)
            }
        }
    }
}

impl std::error::Error for TheoryError {}

/// Zero-one loss on labels; the default loss for bound experiments.
pub fn zero_one(a: usize, b: usize) -> f64 {
    if a == b {
        0.0
    } else {
        1.0
    }
}

/// Explicit hypothesis class: each hypothesis maps point index to class.
#[derive(Debug, Clone)]
pub struct HypothesisClass {
    hyps: Vec<Vec<usize>>,
}

impl HypothesisClass {
    pub fn new(hyps: Vec<Vec<usize>>) -> Self {
        assert!(!hyps.is_empty(), "hypothesis class must not be empty");
        let n = hyps[0].len();
        assert!(hyps.iter().all(|h| h.len() == n), "hypotheses must be total over the domain");
        HypothesisClass { hyps }
    }

    pub fn len(&self) -> usize {
        self.hyps.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn hypothesis(&self, i: usize) -> &[usize] {
        &self.hyps[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = &Vec<usize>> {
        self.hyps.iter()
    }
}

/// Mean loss of a hypothesis over a labelled sample.
pub fn empirical_risk<F>(h: &[usize], dataset: &[(usize, usize)], psi: F) -> Result<f64, TheoryError>
where
    F: Fn(usize, usize) -> f64,
{
    if dataset.is_empty() {
        return Err(TheoryError::EmptyDataset);
    }
    let total: f64 = dataset.iter().map(|(x, y)| psi(h[*x], *y)).sum();
    Ok(total / dataset.len() as f64)
}

/// Expected loss of `h` against labeling `f` under a distribution.
pub fn risk_under<F>(dist: &[f64], h: &[usize], f_labels: &[usize], psi: F) -> f64
where
    F: Fn(usize, usize) -> f64,
{
    assert_eq!(dist.len(), h.len());
    assert_eq!(dist.len(), f_labels.len());
    dist.iter().enumerate().map(|(x, p)| p * psi(h[x], f_labels[x])).sum()
}

/// Discrepancy distance: sup over hypothesis pairs of the absolute gap in
/// expected pairwise loss, by exhaustive enumeration.
pub fn discrepancy_distance<F>(
    dx: &[f64],
    dhat: &[f64],
    class: &HypothesisClass,
    psi: F,
) -> Result<f64, TheoryError>
where
    F: Fn(usize, usize) -> f64,
{
    if dx.len() != dhat.len() {
        return Err(TheoryError::DomainMismatch { left: dx.len(), right: dhat.len() });
    }
    let mut sup = 0.0f64;
    for h in class.iter() {
        for h2 in class.iter() {
            let ex: f64 = dx.iter().enumerate().map(|(x, p)| p * psi(h2[x], h[x])).sum();
            let ehat: f64 = dhat.iter().enumerate().map(|(x, p)| p * psi(h2[x], h[x])).sum();
            sup = sup.max((ex - ehat).abs());
        }
    }
    Ok(sup)
}

/// All terms of the single-task bound on one finite instance.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RiskReport {
    /// Risk of h against the true labeling under the target distribution.
    pub risk: f64,
    /// Risk of h against the source-optimal hypothesis under the source.
    pub source_risk: f64,
    pub discrepancy: f64,
    pub lambda: f64,
    /// Right-hand side: source_risk + discrepancy + lambda.
    pub bound: f64,
    pub bound_holds: bool,
    /// Index in the class of the target argmin (ties -> first).
    pub argmin_target: usize,
    /// Index in the class of the source argmin (ties -> first).
    pub argmin_source: usize,
}

fn argmin_risk<F>(dist: &[f64], f_labels: &[usize], class: &HypothesisClass, psi: F) -> usize
where
    F: Fn(usize, usize) -> f64 + Copy,
{
    let mut best = 0;
    let mut best_risk = f64::INFINITY;
    for (i, h) in class.iter().enumerate() {
        let r = risk_under(dist, h, f_labels, psi);
        if r < best_risk {
            best_risk = r;
            best = i;
        }
    }
    best
}

/// Evaluates every term of the single-task bound:
/// risk <= source_risk + discrepancy + lambda, with
/// lambda = R_target(h, f_target*) + R_source(f_target*, f_source*),
/// both argmins found by enumeration over the class.
pub fn theorem1_report<F>(
    dx: &[f64],
    dhat: &[f64],
    h: &[usize],
    f_labels: &[usize],
    class: &HypothesisClass,
    psi: F,
) -> Result<RiskReport, TheoryError>
where
    F: Fn(usize, usize) -> f64 + Copy,
{
    if dx.len() != dhat.len() {
        return Err(TheoryError::DomainMismatch { left: dx.len(), right: dhat.len() });
    }
    let risk = risk_under(dx, h, f_labels, psi);
    let a_target = argmin_risk(dx, f_labels, class, psi);
    let a_source = argmin_risk(dhat, f_labels, class, psi);
    let f_target = class.hypothesis(a_target);
    let f_source = class.hypothesis(a_source);
    let source_risk = risk_under(dhat, h, f_source, psi);
    let discrepancy = discrepancy_distance(dx, dhat, class, psi)?;
    let lambda = risk_under(dx, h, f_target, psi) + risk_under(dhat, f_target, f_source, psi);
    let bound = source_risk + discrepancy + lambda;
    Ok(RiskReport {
        risk,
        source_risk,
        discrepancy,
        lambda,
        bound,
        bound_holds: risk <= bound + BOUND_SLACK,
        argmin_target: a_target,
        argmin_source: a_source,
    })
}

/// Accumulated bound across tasks: sums of both sides of the per-task reports.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AccumulatedBound {
    pub lhs: f64,
    pub rhs: f64,
    pub holds: bool,
}

pub fn theorem2_accumulated(reports: &[RiskReport]) -> Result<AccumulatedBound, TheoryError> {
    if reports.is_empty() {
        return Err(TheoryError::EmptyReportList);
    }
    let lhs: f64 = reports.iter().map(|r| r.risk).sum();
    let rhs: f64 = reports.iter().map(|r| r.bound).sum();
    Ok(AccumulatedBound { lhs, rhs, holds: lhs <= rhs + BOUND_SLACK })
}

/// Distribution an ideal replay generator reproduces after learning the
/// given task sequence with fresh-sample ratio r:
/// p_1 for the first task, then p_k' = (1 - r) p_(k-1)' + r p_k.
pub fn ideal_replay_recursion(task_dists: &[Vec<f64>], r: f64) -> Result<Vec<f64>, TheoryError> {
    if task_dists.is_empty() {
        return Err(TheoryError::EmptyTaskList);
    }
    assert!(r > 0.0 && r <= 1.0, "replay ratio must lie in (0, 1]");
    let n = task_dists[0].len();
    for d in task_dists {
        if d.len() != n {
            return Err(TheoryError::DomainMismatch { left: n, right: d.len() });
        }
    }
    let mut mix = task_dists[0].clone();
    for task in &task_dists[1..] {
        for (m, p) in mix.iter_mut().zip(task) {
            *m = (1.0 - r) * *m + r * p;
        }
    }
    Ok(mix)
}

/// Closed form of the recursion's per-task weights after K tasks.
pub fn mixture_task_weights(k: usize, r: f64) -> Vec<f64> {
    assert!(k >= 1, "need at least one task");
    assert!(r > 0.0 && r <= 1.0, "replay ratio must lie in (0, 1]");
    if k == 1 {
        return vec![1.0];
    }
    let mut w = vec![0.0; k];
    w[0] = (1.0 - r).powi(k as i32 - 1);
    for (i, wi) in w.iter_mut().enumerate().skip(1) {
        *wi = r * (1.0 - r).powi((k - 1 - i) as i32);
    }
    w
}

/// Uniform mixture of the first `count` task distributions (the cumulative
/// joint distribution the accumulated bound evaluates against).
pub fn uniform_mixture(task_dists: &[Vec<f64>], count: usize) -> Vec<f64> {
    assert!(count >= 1 && count <= task_dists.len());
    let n = task_dists[0].len();
    let mut mix = vec![0.0; n];
    for task in &task_dists[..count] {
        for (m, p) in mix.iter_mut().zip(task) {
            *m += p / count as f64;
        }
    }
    mix
}

// ---- randomized instance suite -------------------------------------------

fn random_simplex(n: usize, rng: &mut Rng) -> Vec<f64> {
    let mut v: Vec<f64> = (0..n).map(|_| rng.uniform() + 1e-9).collect();
    let z: f64 = v.iter().sum();
    v.iter_mut().for_each(|x| *x /= z);
    v
}

fn random_hypothesis(n_points: usize, n_classes: usize, rng: &mut Rng) -> Vec<usize> {
    (0..n_points).map(|_| rng.below(n_classes)).collect()
}

/// One random finite instance with the labeling drawn from the class (the
/// bound's hypothesis), plus an arbitrary evaluated hypothesis.
pub struct RandomInstance {
    pub dx: Vec<f64>,
    pub dhat: Vec<f64>,
    pub h: Vec<usize>,
    pub f_labels: Vec<usize>,
    pub class: HypothesisClass,
}

pub fn random_instance(rng: &mut Rng) -> RandomInstance {
    let n_points = 2 + rng.below(7);
    let n_classes = 2 + rng.below(3);
    let n_hyps = 2 + rng.below(9);
    let hyps: Vec<Vec<usize>> =
        (0..n_hyps).map(|_| random_hypothesis(n_points, n_classes, rng)).collect();
    let f_labels = hyps[rng.below(n_hyps)].clone();
    let class = HypothesisClass::new(hyps);
    RandomInstance {
        dx: random_simplex(n_points, rng),
        dhat: random_simplex(n_points, rng),
        h: random_hypothesis(n_points, n_classes, rng),
        f_labels,
        class,
    }
}

/// Summary of a randomized verification run, serialized as the bound report.
#[derive(Debug, Clone, Serialize)]
pub struct BoundSuiteReport {
    pub seed: u64,
    pub theorem1_instances: usize,
    pub theorem1_violations: usize,
    pub theorem2_instances: usize,
    pub theorem2_violations: usize,
    pub recursion_max_abs_error: f64,
    pub all_hold: bool,
    pub theorem1: Vec<RiskReport>,
    pub theorem2: Vec<AccumulatedBound>,
}

/// Runs the full randomized suite: single-task bounds, accumulated bounds on
/// replay mixtures, and the recursion/closed-form agreement check.
pub fn run_bound_suite(seed: u64, t1_instances: usize, t2_instances: usize) -> BoundSuiteReport {
    let mut rng = Rng::new(seed);
    let mut t1 = Vec::with_capacity(t1_instances);
    for _ in 0..t1_instances {
        let inst = random_instance(&mut rng);
        let report =
            theorem1_report(&inst.dx, &inst.dhat, &inst.h, &inst.f_labels, &inst.class, zero_one)
                .expect("same domain");
        t1.push(report);
    }

    let mut t2 = Vec::with_capacity(t2_instances);
    for _ in 0..t2_instances {
        let n_points = 2 + rng.below(7);
        let n_classes = 2 + rng.below(3);
        let n_hyps = 2 + rng.below(9);
        let hyps: Vec<Vec<usize>> =
            (0..n_hyps).map(|_| random_hypothesis(n_points, n_classes, &mut rng)).collect();
        let f_labels = hyps[rng.below(n_hyps)].clone();
        let class = HypothesisClass::new(hyps);
        let h = random_hypothesis(n_points, n_classes, &mut rng);
        let tasks: Vec<Vec<f64>> = (0..3).map(|_| random_simplex(n_points, &mut rng)).collect();
        let r = 0.5;
        let mut reports = Vec::new();
        for i in 1..=3 {
            let cumulative = uniform_mixture(&tasks, i);
            let replay = ideal_replay_recursion(&tasks[..i], r).expect("same domain");
            reports.push(
                theorem1_report(&cumulative, &replay, &h, &f_labels, &class, zero_one)
                    .expect("same domain"),
            );
        }
        t2.push(theorem2_accumulated(&reports).expect("nonempty"));
    }

    // Recursion vs closed form, point-mass tasks, K up to 64.
    let mut max_err = 0.0f64;
    for &r in &[0.1, 0.5, 0.9] {
        for k in 1..=64usize {
            let tasks: Vec<Vec<f64>> = (0..k)
                .map(|i| {
                    let mut d = vec![0.0; k];
                    d[i] = 1.0;
                    d
                })
                .collect();
            let mix = ideal_replay_recursion(&tasks, r).expect("same domain");
            let weights = mixture_task_weights(k, r);
            for (m, w) in mix.iter().zip(&weights) {
                max_err = max_err.max((m - w).abs());
            }
            let sum: f64 = weights.iter().sum();
            max_err = max_err.max((sum - 1.0).abs());
        }
    }

    let t1_viol = t1.iter().filter(|r| !r.bound_holds).count();
    let t2_viol = t2.iter().filter(|r| !r.holds).count();
    BoundSuiteReport {
        seed,
        theorem1_instances: t1_instances,
        theorem1_violations: t1_viol,
        theorem2_instances: t2_instances,
        theorem2_violations: t2_viol,
        recursion_max_abs_error: max_err,
        all_hold: t1_viol == 0 && t2_viol == 0 && max_err <= BOUND_SLACK,
        theorem1: t1,
        theorem2: t2,
    }
}
