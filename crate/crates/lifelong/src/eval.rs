//! Metrics and figure artifacts: accuracy, importance-weighted NLL,
//! forgetting curves, latent traversals, cross-input interpolations, and
//! binary portable-graymap/pixmap emission.

use std::fmt;
use std::io;
use std::path::Path;

use diffcore::{Rng, Tensor};

use crate::data::TaskDataset;
use crate::error::ModelError;
use crate::latents::one_hot;
use crate::metrics::MetricsLog;
use crate::student::{ReconLikelihood, StudentModel, TrainingMode};

#[derive(Debug, Clone, PartialEq)]
pub enum EvalError {
    EmptyLog,
    MissingColumn { task_index: usize, epoch: usize, eval_task: usize },
}

impl fmt::Display for EvalError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            EvalError::EmptyLog => write!(f, "metrics log has no evaluation rows"),
            EvalError::MissingColumn { task_index, epoch, eval_task } => write!(
                f,
                "missing evaluation of task {} at (task {}, epoch {})",
                eval_task, task_index, epoch
            ),
        }
    }
}

impl std::error::Error for EvalError {}

// ---- scalar metrics --------------------------------------------------------

/// Test-set accuracy in percent, using the class posterior's argmax.
pub fn accuracy_eval(student: &StudentModel, ds: &TaskDataset) -> Result<f64, ModelError> {
    if ds.test_len() == 0 {
        return Err(ModelError::EmptyBatch);
    }
    let predictions = student.classify_batch(&ds.test_inputs)?;
    let correct = predictions.iter().zip(&ds.test_labels).filter(|(p, t)| p == t).count();
    Ok(100.0 * correct as f64 / ds.test_len() as f64)
}

fn softplus(v: f64) -> f64 {
    v.max(0.0) + (-v.abs()).exp().ln_1p()
}

fn log_sigmoid(v: f64) -> f64 {
    -softplus(-v)
}

/// log p(x | logits) for per-pixel Bernoulli means sigmoid(logits).
pub fn bernoulli_log_lik(logits: &[f64], x: &[f64]) -> f64 {
    logits
        .iter()
        .zip(x)
        .map(|(u, t)| t * log_sigmoid(*u) + (1.0 - t) * log_sigmoid(-u))
        .sum()
}

/// log p(x | logits) for Gaussian means sigmoid(logits) with fixed sigma.
pub fn gaussian_log_lik(logits: &[f64], x: &[f64], sigma: f64) -> f64 {
    let ln_norm = sigma.ln() + 0.5 * (2.0 * std::f64::consts::PI).ln();
    logits
        .iter()
        .zip(x)
        .map(|(u, t)| {
            let mean = 1.0 / (1.0 + (-u).exp());
            -0.5 * ((t - mean) / sigma).powi(2) - ln_norm
        })
        .sum()
}

fn log_normal(z: &[f64], mean: &[f64], sigma: &[f64]) -> f64 {
    let ln2pi = (2.0 * std::f64::consts::PI).ln();
    z.iter()
        .zip(mean)
        .zip(sigma)
        .map(|((zv, m), s)| -0.5 * ((zv - m) / s).powi(2) - s.ln() - 0.5 * ln2pi)
        .sum()
}

fn logsumexp(vals: &[f64]) -> f64 {
    let max = vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return max;
    }
    max + vals.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Average negative log-likelihood (nats) of a task's test set under the
/// model conditioned on the known task identity, estimated by importance
/// weighting over the latent posteriors. With one sample per datum this is
/// the (stochastic) negative evidence lower bound; more samples tighten it.
pub fn nll_eval(
    student: &StudentModel,
    ds: &TaskDataset,
    domain_index: usize,
    samples_per_datum: usize,
    rng: &mut Rng,
) -> f64 {
    assert!(samples_per_datum >= 1, "need at least one sample per datum");
    let cfg = student.config();
    let d_z = cfg.d_z;
    let l_m = cfg.l_m;
    let with_s = cfg.mode != TrainingMode::Unsupervised;
    let prior_mean = student.prior().mean_row(domain_index).to_vec();
    let sp = vec![cfg.sigma_prior; d_z];
    let delta = one_hot(domain_index, cfg.k_max);
    let uniform_s = vec![1.0 / l_m as f64; l_m];
    let post = student.infer_batch(&ds.test_inputs);

    let k = samples_per_datum;
    let mut total = 0.0;
    for i in 0..ds.test_len() {
        let x = ds.test_row(i);
        let mu = &post.mu.data()[i * d_z..(i + 1) * d_z];
        let ls = &post.log_sigma.data()[i * d_z..(i + 1) * d_z];
        let sigma: Vec<f64> = ls.iter().map(|v| v.exp()).collect();
        let s_probs = &post.s_probs.data()[i * l_m..(i + 1) * l_m];

        // All k latent draws decoded in one batch.
        let mut latents = Vec::with_capacity(k * (d_z + l_m + cfg.k_max));
        let mut zs = Vec::with_capacity(k);
        let mut s_picks = Vec::with_capacity(k);
        for _ in 0..k {
            let z: Vec<f64> =
                (0..d_z).map(|j| mu[j] + sigma[j] * rng.normal()).collect();
            latents.extend_from_slice(&z);
            if with_s {
                let u = rng.uniform();
                let mut cum = 0.0;
                let mut pick = l_m - 1;
                for (c, p) in s_probs.iter().enumerate() {
                    cum += p;
                    if u < cum {
                        pick = c;
                        break;
                    }
                }
                latents.extend_from_slice(&one_hot(pick, l_m));
                s_picks.push(pick);
            } else {
                latents.extend_from_slice(&uniform_s);
            }
            latents.extend_from_slice(&delta);
            zs.push(z);
        }
        let latents = Tensor::new(vec![k, d_z + l_m + cfg.k_max], latents);
        let logits = student.decode_logits_batch(&latents);
        let d_width = logits.shape()[1];

        let mut log_w = Vec::with_capacity(k);
        for j in 0..k {
            let row = &logits.data()[j * d_width..(j + 1) * d_width];
            let ll = match cfg.recon {
                ReconLikelihood::Bernoulli => bernoulli_log_lik(row, x),
                ReconLikelihood::GaussianMse { sigma } => gaussian_log_lik(row, x, sigma),
            };
            let mut w = ll + log_normal(&zs[j], &prior_mean, &sp) - log_normal(&zs[j], mu, &sigma);
            if with_s {
                let pick = s_picks[j];
                w += (1.0 / l_m as f64).ln() - s_probs[pick].ln();
            }
            log_w.push(w);
        }
        total += -(logsumexp(&log_w) - (k as f64).ln());
    }
    total / ds.test_len() as f64
}

// ---- forgetting curves ------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub task_learned: usize,
    pub epoch: usize,
    pub values: Vec<f64>,
}

/// Per-(task, epoch) evaluation values reshaped into one row per training
/// epoch with one column per evaluated task.
#[derive(Debug, Clone, PartialEq)]
pub struct ForgettingCurve {
    pub metric: String,
    pub eval_tasks: usize,
    pub rows: Vec<CurveRow>,
}

impl ForgettingCurve {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("task_learned,epoch");
        for t in 0..self.eval_tasks {
            out.push_str(&format!(",{}_task_{}", self.metric, t));
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("{},{}", row.task_learned, row.epoch));
            for v in &row.values {
                out.push_str(&format!(",{}", v));
            }
            out.push('\n');
        }
        out
    }

    /// Value for a single (task_learned, epoch, eval_task) cell.
    pub fn value(&self, task_learned: usize, epoch: usize, eval_task: usize) -> Option<f64> {
        self.rows
            .iter()
            .find(|r| r.task_learned == task_learned && r.epoch == epoch)
            .and_then(|r| r.values.get(eval_task).copied())
    }
}

/// Reshapes the metrics log's evaluation rows into a forgetting curve.
pub fn forgetting_curve(metrics: &MetricsLog) -> Result<ForgettingCurve, EvalError> {
    if metrics.evals.is_empty() {
        return Err(EvalError::EmptyLog);
    }
    let metric = metrics.evals[0].metric.clone();
    let eval_tasks = metrics.evals.iter().map(|e| e.eval_task).max().unwrap() + 1;
    let mut rows: Vec<CurveRow> = Vec::new();
    for e in &metrics.evals {
        if rows.is_empty()
            || rows.last().unwrap().task_learned != e.task_index
            || rows.last().unwrap().epoch != e.epoch
        {
            rows.push(CurveRow { task_learned: e.task_index, epoch: e.epoch, values: Vec::new() });
        }
        let row = rows.last_mut().unwrap();
        if e.eval_task != row.values.len() {
            return Err(EvalError::MissingColumn {
                task_index: e.task_index,
                epoch: e.epoch,
                eval_task: row.values.len(),
            });
        }
        if e.metric == "accuracy" {
            assert!((0.0..=100.0).contains(&e.value), "accuracy {} out of range", e.value);
        }
        row.values.push(e.value);
    }
    for row in &rows {
        if row.values.len() != eval_tasks {
            return Err(EvalError::MissingColumn {
                task_index: row.task_learned,
                epoch: row.epoch,
                eval_task: row.values.len(),
            });
        }
    }
    Ok(ForgettingCurve { metric, eval_tasks, rows })
}

// ---- latent-space figures ---------------------------------------------------

/// A strip of equally shaped tiles, values in [0, 1].
#[derive(Debug, Clone)]
pub struct ImageGrid {
    pub tile_shape: Vec<usize>,
    pub tiles: Vec<Vec<f64>>,
}

impl ImageGrid {
    fn new(tile_shape: Vec<usize>, tiles: Vec<Vec<f64>>) -> Self {
        let numel: usize = tile_shape.iter().product();
        for t in &tiles {
            assert_eq!(t.len(), numel, "tile size mismatch");
            assert!(t.iter().all(|v| (0.0..=1.0).contains(v)), "tile values out of [0, 1]");
        }
        ImageGrid { tile_shape, tiles }
    }

    pub fn len(&self) -> usize {
        self.tiles.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tiles.is_empty()
    }
}

/// Point-estimate posteriors for figure generation: posterior mean z, the
/// simplex vectors as-is (a fixed uniform s in unsupervised mode).
fn point_estimates(student: &StudentModel, x: &Tensor) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let bundle = student.infer(x);
    let cfg = student.config();
    let s = if cfg.mode == TrainingMode::Unsupervised {
        vec![1.0 / cfg.l_m as f64; cfg.l_m]
    } else {
        bundle.s_probs.clone()
    };
    (bundle.z_post.mu.data().to_vec(), s, bundle.delta_probs.clone())
}

/// Reconstruction through the point-estimate latents.
pub fn reconstruct(student: &StudentModel, x: &Tensor) -> Tensor {
    let (z, s, d) = point_estimates(student, x);
    student.decode(&z, &s, &d)
}

/// Sweeps one continuous latent coordinate over [lo, hi] in `steps` equal
/// increments, holding everything else at the point estimates.
pub fn latent_traversal(
    student: &StudentModel,
    x: &Tensor,
    dim_index: usize,
    lo: f64,
    hi: f64,
    steps: usize,
) -> ImageGrid {
    let cfg = student.config();
    assert!(dim_index < cfg.d_z, "latent index {} out of d_z {}", dim_index, cfg.d_z);
    assert!(steps >= 1);
    let (mut z, s, d) = point_estimates(student, x);
    let mut tiles = Vec::with_capacity(steps);
    for i in 0..steps {
        let t = if steps == 1 { 0.0 } else { i as f64 / (steps - 1) as f64 };
        z[dim_index] = lo + t * (hi - lo);
        tiles.push(student.decode(&z, &s, &d).data().to_vec());
    }
    ImageGrid::new(cfg.input_shape.clone(), tiles)
}

/// Linear interpolation between two inputs' point-estimate latents; the
/// endpoints decode each input's own reconstruction exactly.
pub fn interpolate_pair(student: &StudentModel, x_a: &Tensor, x_b: &Tensor, steps: usize) -> ImageGrid {
    assert!(steps >= 2, "interpolation needs at least the two endpoints");
    assert_eq!(x_a.numel(), x_b.numel(), "inputs must share a shape");
    let (za, sa, da) = point_estimates(student, x_a);
    let (zb, sb, db) = point_estimates(student, x_b);
    let lerp = |a: &[f64], b: &[f64], t: f64| -> Vec<f64> {
        a.iter().zip(b).map(|(x, y)| x + t * (y - x)).collect()
    };
    let mut tiles = Vec::with_capacity(steps);
    for i in 0..steps {
        let (z, s, d) = if i == 0 {
            (za.clone(), sa.clone(), da.clone())
        } else if i == steps - 1 {
            (zb.clone(), sb.clone(), db.clone())
        } else {
            let t = i as f64 / (steps - 1) as f64;
            (lerp(&za, &zb, t), lerp(&sa, &sb, t), lerp(&da, &db, t))
        };
        tiles.push(student.decode(&z, &s, &d).data().to_vec());
    }
    ImageGrid::new(student.config().input_shape.clone(), tiles)
}

// ---- binary image emission ---------------------------------------------------

/// Writes the grid as one horizontal strip: P5 graymap for single-channel
/// tiles, P6 pixmap for three-channel tiles.
pub fn write_grid(grid: &ImageGrid, path: &Path) -> io::Result<()> {
    assert!(!grid.tiles.is_empty(), "empty grid");
    let (c, h, w) = match grid.tile_shape.as_slice() {
        [c, h, w] => (*c, *h, *w),
        [d] => (1, 1, *d),
        other => panic!("unsupported tile shape {:?}", other),
    };
    assert!(c == 1 || c == 3, "grids are emitted for 1 or 3 channels, got {}", c);
    let tiles = grid.tiles.len();
    let total_w = tiles * w;
    let mut bytes = Vec::with_capacity(total_w * h * c + 32);
    let header = if c == 1 { format!("P5\n{} {}\n255\n", total_w, h) } else { format!("P6\n{} {}\n255\n", total_w, h) };
    bytes.extend_from_slice(header.as_bytes());
    for y in 0..h {
        for (_, tile) in grid.tiles.iter().enumerate() {
            for x in 0..w {
                for ch in 0..c {
                    let v = tile[(ch * h + y) * w + x];
                    bytes.push((v * 255.0).round().clamp(0.0, 255.0) as u8);
                }
            }
        }
    }
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, bytes)
}

// ---- rank statistics -----------------------------------------------------------

/// Spearman rank correlation (average ranks on ties).
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len());
    assert!(a.len() >= 2, "need at least two points");
    let ranks = |v: &[f64]| -> Vec<f64> {
        let mut idx: Vec<usize> = (0..v.len()).collect();
        idx.sort_by(|&i, &j| v[i].partial_cmp(&v[j]).unwrap());
        let mut r = vec![0.0; v.len()];
        let mut i = 0;
        while i < idx.len() {
            let mut j = i;
            while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
                j += 1;
            }
            let avg = (i + j) as f64 / 2.0 + 1.0;
            for &k in &idx[i..=j] {
                r[k] = avg;
            }
            i = j + 1;
        }
        r
    };
    let ra = ranks(a);
    let rb = ranks(b);
    let n = a.len() as f64;
    let mean = (n + 1.0) / 2.0;
    let mut num = 0.0;
    let mut da = 0.0;
    let mut db = 0.0;
    for (x, y) in ra.iter().zip(&rb) {
        num += (x - mean) * (y - mean);
        da += (x - mean) * (x - mean);
        db += (y - mean) * (y - mean);
    }
    num / (da.sqrt() * db.sqrt()).max(1e-300)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::EvalRecord;
    use crate::student::{Arch, StudentConfig};

    fn toy_student(mode: TrainingMode) -> StudentModel {
        let mut cfg = StudentConfig::new(vec![1, 8, 8], 3, 2, 2);
        cfg.arch = Arch::Mlp { hidden: 16 };
        cfg.mode = mode;
        StudentModel::new(cfg, &mut Rng::new(15))
    }

    #[test]
    fn accuracy_is_deterministic_and_permutation_invariant() {
        let student = toy_student(TrainingMode::Supervised);
        let tasks = crate::data::gen_glyph_tasks(1, 2, 12, 8, 0.05, 8).unwrap();
        let a = accuracy_eval(&student, &tasks[0]).unwrap();
        let b = accuracy_eval(&student, &tasks[0]).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
        // Permuting the test set leaves accuracy unchanged.
        let ds = &tasks[0];
        let mut perm: Vec<usize> = (0..ds.test_len()).collect();
        perm.reverse();
        let (px, pl) = ds.gather_test(&perm);
        let permuted = TaskDataset::new(
            "p".into(),
            ds.input_shape.clone(),
            ds.train_inputs.clone(),
            ds.train_labels.clone(),
            px,
            pl,
            ds.class_count,
        );
        let c = accuracy_eval(&student, &permuted).unwrap();
        assert_eq!(a, c);
    }

    #[test]
    fn nll_more_samples_never_hurt_much() {
        // Importance weighting tightens in expectation; check the paired
        // difference at 3 standard errors.
        let student = toy_student(TrainingMode::Supervised);
        let tasks = crate::data::gen_glyph_tasks(1, 2, 24, 8, 0.05, 9).unwrap();
        let mut rng = Rng::new(33);
        let one = nll_eval(&student, &tasks[0], 0, 1, &mut rng);
        let many = nll_eval(&student, &tasks[0], 0, 64, &mut rng);
        assert!(
            many <= one + 0.05,
            "k=64 nll {} should not exceed k=1 nll {}",
            many,
            one
        );
    }

    #[test]
    fn forgetting_curve_shapes() {
        let mut log = MetricsLog::new();
        for task in 0..2 {
            for epoch in 0..3 {
                for et in 0..2 {
                    log.evals.push(EvalRecord {
                        task_index: task,
                        epoch,
                        eval_task: et,
                        metric: "accuracy".into(),
                        value: 50.0 + task as f64,
                    });
                }
            }
        }
        let curve = forgetting_curve(&log).unwrap();
        assert_eq!(curve.rows.len(), 6);
        assert_eq!(curve.eval_tasks, 2);
        assert_eq!(curve.value(1, 2, 0), Some(51.0));
        let csv = curve.to_csv();
        assert_eq!(csv.lines().count(), 7);

        // A missing column is reported.
        log.evals.pop();
        match forgetting_curve(&log) {
            Err(EvalError::MissingColumn { .. }) => {}
            other => panic!("unexpected {:?}", other),
        }
        assert_eq!(forgetting_curve(&MetricsLog::new()), Err(EvalError::EmptyLog));
    }

    #[test]
    fn traversal_shapes_and_degenerate_range() {
        let student = toy_student(TrainingMode::Supervised);
        let x = Tensor::new(vec![64], vec![0.4; 64]);
        let grid = latent_traversal(&student, &x, 1, -2.0, 2.0, 7);
        assert_eq!(grid.tiles.len(), 7);
        assert!(grid.tiles.iter().all(|t| t.iter().all(|v| (0.0..=1.0).contains(v))));
        let flat = latent_traversal(&student, &x, 1, 0.7, 0.7, 5);
        for t in &flat.tiles {
            assert_eq!(t, &flat.tiles[0]);
        }
    }

    #[test]
    fn interpolation_endpoints_reconstruct_inputs() {
        let student = toy_student(TrainingMode::Supervised);
        let xa = Tensor::new(vec![64], (0..64).map(|i| (i % 2) as f64).collect());
        let xb = Tensor::new(vec![64], (0..64).map(|i| ((i / 8) % 2) as f64).collect());
        let grid = interpolate_pair(&student, &xa, &xb, 10);
        assert_eq!(grid.tiles.len(), 10);
        let ra = reconstruct(&student, &xa);
        let rb = reconstruct(&student, &xb);
        assert!(grid.tiles[0].iter().zip(ra.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        assert!(grid.tiles[9].iter().zip(rb.data()).all(|(a, b)| a.to_bits() == b.to_bits()));
        // Identical inputs give a constant strip.
        let same = interpolate_pair(&student, &xa, &xa, 4);
        for t in &same.tiles {
            assert_eq!(t, &same.tiles[0]);
        }
    }

    #[test]
    fn pgm_emission_layout() {
        let grid = ImageGrid::new(
            vec![1, 2, 2],
            vec![vec![0.0, 1.0, 0.5, 0.25], vec![1.0, 0.0, 0.75, 1.0]],
        );
        let mut path = std::env::temp_dir();
        path.push(format!("grid-test-{}.pgm", std::process::id()));
        write_grid(&grid, &path).unwrap();
        let bytes = std::fs::read(&path).unwrap();
        let header = b"P5\n4 2\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        // Row 0: tile0 row0, tile1 row0; row 1: tile0 row1, tile1 row1.
        assert_eq!(&bytes[header.len()..], &[0, 255, 255, 0, 128, 64, 191, 255]);
        let _ = std::fs::remove_file(path);
    }

    #[test]
    fn spearman_basics() {
        assert!((spearman(&[1.0, 2.0, 3.0], &[10.0, 20.0, 30.0]) - 1.0).abs() < 1e-12);
        assert!((spearman(&[1.0, 2.0, 3.0], &[3.0, 2.0, 1.0]) + 1.0).abs() < 1e-12);
        let s = spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 3.0, 2.0, 4.0]);
        assert!(s > 0.5 && s < 1.0);
    }
}
