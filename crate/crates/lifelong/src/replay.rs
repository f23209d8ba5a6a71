//! Orchestration of the sequential training loop: equal-ratio batch mixing
//! of teacher-generated and fresh data, pseudo-labeling of generated
//! samples, teacher snapshotting at task boundaries, and the full
//! teacher-then-student schedule over a task sequence.

use diffcore::{Rng, Tensor};

use crate::data::{split_semi, TaskDataset};
use crate::error::ModelError;
use crate::eval::{accuracy_eval, nll_eval};
use crate::metrics::{EvalRecord, MetricsLog, StepRecord};
use crate::student::{
    LabeledBatch, StudentConfig, StudentModel, TrainingMode, UnlabeledBatch,
};
use crate::teacher::{TeacherConfig, TeacherModel, TeacherSnapshot};

/// Ordered tasks plus the fresh-sample ratio r: each batch slot is fresh
/// with probability r and teacher-generated otherwise.
#[derive(Debug, Clone)]
pub struct TaskSequence {
    pub tasks: Vec<TaskDataset>,
    pub replay_ratio: f64,
}

impl TaskSequence {
    pub fn new(tasks: Vec<TaskDataset>, replay_ratio: f64) -> Result<Self, ModelError> {
        if tasks.is_empty() {
            return Err(ModelError::EmptyBatch);
        }
        assert!(
            replay_ratio > 0.0 && replay_ratio <= 1.0,
            "replay ratio must lie in (0, 1], got {}",
            replay_ratio
        );
        let shape = tasks[0].input_shape.clone();
        for t in &tasks {
            if t.input_shape != shape {
                return Err(ModelError::InconsistentInputShape {
                    expected: shape,
                    got: t.input_shape.clone(),
                });
            }
        }
        let classes = tasks[0].class_count;
        assert!(
            tasks.iter().all(|t| t.class_count == classes),
            "all tasks must share one class count"
        );
        Ok(TaskSequence { tasks, replay_ratio })
    }

    pub fn len(&self) -> usize {
        self.tasks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tasks.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Origin {
    Fresh,
    Generated,
}

/// One mixed batch: inputs, labels (absent in unsupervised runs), domain
/// labels, and the per-slot origin.
#[derive(Debug, Clone)]
pub struct ReplayBatch {
    pub x: Tensor,
    pub y: Option<Vec<usize>>,
    pub d: Vec<usize>,
    pub origins: Vec<Origin>,
}

impl ReplayBatch {
    pub fn len(&self) -> usize {
        self.origins.len()
    }

    pub fn is_empty(&self) -> bool {
        self.origins.is_empty()
    }

    pub fn fresh_fraction(&self) -> f64 {
        if self.origins.is_empty() {
            return 0.0;
        }
        self.origins.iter().filter(|o| **o == Origin::Fresh).count() as f64
            / self.origins.len() as f64
    }
}

/// Labels generated samples with the (frozen) student's class predictions.
/// No confidence threshold: every sample gets the argmax label.
pub fn pseudo_label_batch(student: &StudentModel, generated: &Tensor) -> Result<Vec<usize>, ModelError> {
    student.classify_batch(generated)
}

/// Builds one mixed batch for task `current_task` (0-based). Slot `i` keeps
/// the i-th fresh sample with probability r, otherwise it is generated by
/// the snapshot under a domain drawn uniformly over previous tasks and
/// pseudo-labeled by `labeler`. The first task is always all-fresh.
pub fn mix_batch(
    snapshot: Option<&TeacherSnapshot>,
    labeler: Option<&StudentModel>,
    fresh_x: &Tensor,
    fresh_y: Option<&[usize]>,
    current_task: usize,
    r: f64,
    rng: &mut Rng,
) -> Result<ReplayBatch, ModelError> {
    let n = fresh_x.shape()[0];
    if current_task == 0 {
        return Ok(ReplayBatch {
            x: fresh_x.clone(),
            y: fresh_y.map(|y| y.to_vec()),
            d: vec![0; n],
            origins: vec![Origin::Fresh; n],
        });
    }
    let snapshot = snapshot.ok_or(ModelError::MissingSnapshot { task: current_task })?;

    let mut origins = Vec::with_capacity(n);
    let mut gen_slots = Vec::new();
    for i in 0..n {
        if rng.uniform() < r {
            origins.push(Origin::Fresh);
        } else {
            origins.push(Origin::Generated);
            gen_slots.push(i);
        }
    }

    let d_width = fresh_x.shape()[1];
    let mut x = fresh_x.data().to_vec();
    let mut d = vec![current_task; n];
    let mut y = fresh_y.map(|y| y.to_vec());

    if !gen_slots.is_empty() {
        let previous: Vec<usize> = (0..current_task).collect();
        let (gen_x, gen_d) = snapshot.sample(gen_slots.len(), &previous, rng);
        let gen_y = match labeler {
            Some(student) => Some(pseudo_label_batch(student, &gen_x)?),
            None => None,
        };
        for (j, &slot) in gen_slots.iter().enumerate() {
            x[slot * d_width..(slot + 1) * d_width]
                .copy_from_slice(&gen_x.data()[j * d_width..(j + 1) * d_width]);
            d[slot] = gen_d[j];
            if let (Some(y), Some(gy)) = (y.as_mut(), gen_y.as_ref()) {
                y[slot] = gy[j];
            }
        }
    }

    Ok(ReplayBatch { x: Tensor::new(vec![n, d_width], x), y, d, origins })
}

/// Freezes the teacher's generator at a task boundary.
pub fn task_switch(teacher: &TeacherModel, task_count: usize) -> TeacherSnapshot {
    teacher.snapshot(task_count)
}

/// Everything a lifelong run is configured by, beyond the task sequence.
#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs_per_task: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub student: StudentConfig,
    pub teacher: TeacherConfig,
    /// Labeled samples per class per task (semi-supervised mode only).
    pub labeled_per_class: Option<usize>,
    /// Samples per datum for the per-epoch NLL rows in unsupervised runs.
    pub eval_nll_samples: usize,
}

/// The trained models plus the full metrics log and per-task snapshots.
pub struct LifelongOutcome {
    pub student: StudentModel,
    pub teacher: TeacherModel,
    pub metrics: MetricsLog,
    pub snapshots: Vec<TeacherSnapshot>,
}

/// Sequential training over all tasks: for each task, every epoch draws
/// replay-mixed batches that first update the teacher (critic iterations,
/// then one generator step) and then the student, evaluates all tasks'
/// test sets, and snapshots the teacher (and the pseudo-labeling student)
/// at the task boundary.
pub fn lifelong_train(
    seq: &TaskSequence,
    cfg: &TrainConfig,
    rng: &mut Rng,
) -> Result<LifelongOutcome, ModelError> {
    let mode = cfg.student.mode;
    validate(seq, cfg)?;

    let mut student = StudentModel::new(cfg.student.clone(), rng);
    let mut teacher = TeacherModel::new(cfg.teacher.clone(), rng);
    let mut metrics = MetricsLog::new();
    let mut snapshots: Vec<TeacherSnapshot> = Vec::new();
    let mut prev_snapshot: Option<TeacherSnapshot> = None;
    let mut frozen_labeler: Option<StudentModel> = None;
    let r = seq.replay_ratio;

    for (k, task) in seq.tasks.iter().enumerate() {
        let semi_split = if mode == TrainingMode::SemiSupervised {
            let per_class = cfg.labeled_per_class.expect("semi mode needs labeled_per_class");
            let split = split_semi(task, per_class, rng.next_u64())
                .unwrap_or_else(|e| panic!("semi split failed: {}", e));
            Some(split)
        } else {
            None
        };
        let seen: Vec<usize> = (0..=k).collect();

        for epoch in 0..cfg.epochs_per_task {
            let mut order: Vec<usize> = (0..task.train_len()).collect();
            rng.shuffle(&mut order);
            let steps = order.len().div_ceil(cfg.batch_size);

            // Per-epoch cyclic cursors over the semi split.
            let (lab_pool, unl_pool) = match &semi_split {
                Some(split) => {
                    let mut l = split.labeled.clone();
                    let mut u = split.unlabeled.clone();
                    rng.shuffle(&mut l);
                    rng.shuffle(&mut u);
                    (l, u)
                }
                None => (Vec::new(), Vec::new()),
            };
            let mut lab_cursor = 0usize;
            let mut unl_cursor = 0usize;

            for step in 0..steps {
                let chunk: Vec<usize> = order
                    [step * cfg.batch_size..((step + 1) * cfg.batch_size).min(order.len())]
                    .to_vec();

                // Teacher phase: critic iterations on fresh mixed batches,
                // then one generator step over all seen domains.
                let mut critic_loss = 0.0;
                for _ in 0..cfg.teacher.critic_steps {
                    let draw: Vec<usize> =
                        (0..cfg.batch_size).map(|_| rng.below(task.train_len())).collect();
                    let (fx, fy) = task.gather_train(&draw);
                    let real = mix_batch(
                        prev_snapshot.as_ref(),
                        frozen_labeler.as_ref(),
                        &fx,
                        Some(&fy),
                        k,
                        r,
                        rng,
                    )?;
                    critic_loss = teacher.critic_step(&real.x, &real.d, &seen, rng, cfg.lr);
                }
                let gen_loss = teacher.generator_step(cfg.batch_size, &seen, rng, cfg.lr);

                // Student phase on an independently mixed batch.
                let losses = match mode {
                    TrainingMode::Supervised => {
                        let (fx, fy) = task.gather_train(&chunk);
                        let batch = mix_batch(
                            prev_snapshot.as_ref(),
                            frozen_labeler.as_ref(),
                            &fx,
                            Some(&fy),
                            k,
                            r,
                            rng,
                        )?;
                        let lb = LabeledBatch {
                            x: batch.x,
                            y: batch.y.expect("supervised labels"),
                            d: batch.d,
                        };
                        student.train_step(&lb, None, rng, cfg.lr)?
                    }
                    TrainingMode::SemiSupervised => {
                        let split = semi_split.as_ref().expect("split exists");
                        let lab_share = ((cfg.batch_size * split.labeled.len())
                            / task.train_len())
                        .max(1);
                        let unl_share = cfg.batch_size.saturating_sub(lab_share);
                        let lab_idx: Vec<usize> = (0..lab_share)
                            .map(|_| {
                                let i = lab_pool[lab_cursor % lab_pool.len()];
                                lab_cursor += 1;
                                i
                            })
                            .collect();
                        let (lx, ly) = task.gather_train(&lab_idx);
                        let lab_batch = mix_batch(
                            prev_snapshot.as_ref(),
                            frozen_labeler.as_ref(),
                            &lx,
                            Some(&ly),
                            k,
                            r,
                            rng,
                        )?;
                        let lb = LabeledBatch {
                            x: lab_batch.x,
                            y: lab_batch.y.expect("labels"),
                            d: lab_batch.d,
                        };
                        let ub = if unl_share > 0 && !unl_pool.is_empty() {
                            let unl_idx: Vec<usize> = (0..unl_share)
                                .map(|_| {
                                    let i = unl_pool[unl_cursor % unl_pool.len()];
                                    unl_cursor += 1;
                                    i
                                })
                                .collect();
                            let (ux, _) = task.gather_train(&unl_idx);
                            let n_u = unl_idx.len();
                            Some(UnlabeledBatch { x: ux, d: vec![k; n_u] })
                        } else {
                            None
                        };
                        student.train_step(&lb, ub.as_ref(), rng, cfg.lr)?
                    }
                    TrainingMode::Unsupervised => {
                        let (fx, _) = task.gather_train(&chunk);
                        let batch = mix_batch(
                            prev_snapshot.as_ref(),
                            None,
                            &fx,
                            None,
                            k,
                            r,
                            rng,
                        )?;
                        let ub = UnlabeledBatch { x: batch.x, d: batch.d };
                        student.train_step_unsupervised(&ub, rng, cfg.lr)?
                    }
                };

                metrics.steps.push(StepRecord {
                    task_index: k,
                    epoch,
                    step,
                    loss_total: losses.total,
                    loss_recon: losses.recon,
                    kl_z: losses.kl_z,
                    kl_delta: losses.kl_delta,
                    kl_s: losses.kl_s,
                    teacher_critic_loss: critic_loss,
                    teacher_gen_loss: gen_loss,
                });
            }

            // Per-epoch evaluation over every task's held-out test set;
            // generated samples never enter these sets.
            for (et, eval_task) in seq.tasks.iter().enumerate() {
                let (metric, value) = match mode {
                    TrainingMode::Unsupervised => {
                        let mut eval_rng = rng.fork();
                        ("nll", nll_eval(&student, eval_task, et, cfg.eval_nll_samples, &mut eval_rng))
                    }
                    _ => ("accuracy", accuracy_eval(&student, eval_task)?),
                };
                metrics.evals.push(EvalRecord {
                    task_index: k,
                    epoch,
                    eval_task: et,
                    metric: metric.to_string(),
                    value,
                });
            }
        }

        let snap = task_switch(&teacher, k + 1);
        prev_snapshot = Some(snap.clone());
        snapshots.push(snap);
        frozen_labeler = match mode {
            TrainingMode::Unsupervised => None,
            _ => Some(student.clone()),
        };
    }

    Ok(LifelongOutcome { student, teacher, metrics, snapshots })
}

fn validate(seq: &TaskSequence, cfg: &TrainConfig) -> Result<(), ModelError> {
    let task = &seq.tasks[0];
    if cfg.student.input_shape != task.input_shape {
        return Err(ModelError::InconsistentInputShape {
            expected: task.input_shape.clone(),
            got: cfg.student.input_shape.clone(),
        });
    }
    assert_eq!(cfg.student.l_m, task.class_count, "student l_m must match the class count");
    assert!(cfg.student.k_max >= seq.len(), "student k_max must cover all tasks");
    assert_eq!(cfg.teacher.k_max, cfg.student.k_max, "teacher and student domain counts differ");
    assert_eq!(cfg.teacher.input_shape, cfg.student.input_shape, "teacher input shape differs");
    assert!(cfg.batch_size >= 1 && cfg.epochs_per_task >= 1);
    if cfg.student.mode == TrainingMode::SemiSupervised {
        assert!(cfg.labeled_per_class.is_some(), "semi mode needs labeled_per_class");
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::gen_glyph_tasks;
    use crate::student::Arch;

    fn tiny_run_config(mode: TrainingMode, tasks: usize) -> TrainConfig {
        let mut student = StudentConfig::new(vec![1, 8, 8], 4, 2, tasks);
        student.arch = Arch::Mlp { hidden: 24 };
        student.mode = mode;
        let mut teacher = TeacherConfig::new(vec![1, 8, 8], 4, tasks);
        teacher.gen_arch = Arch::Mlp { hidden: 24 };
        teacher.critic_hidden = 24;
        teacher.critic_steps = 2;
        TrainConfig {
            epochs_per_task: 1,
            batch_size: 8,
            lr: 1e-3,
            student,
            teacher,
            labeled_per_class: if mode == TrainingMode::SemiSupervised { Some(2) } else { None },
            eval_nll_samples: 1,
        }
    }

    #[test]
    fn first_task_batches_are_all_fresh() {
        let mut rng = Rng::new(7);
        let tasks = gen_glyph_tasks(1, 2, 8, 8, 0.05, 3).unwrap();
        let (x, y) = tasks[0].gather_train(&[0, 1, 2, 3]);
        let batch = mix_batch(None, None, &x, Some(&y), 0, 0.5, &mut rng).unwrap();
        assert!(batch.origins.iter().all(|o| *o == Origin::Fresh));
        assert_eq!(batch.d, vec![0; 4]);
        assert_eq!(batch.y.as_deref(), Some(&y[..]));
    }

    #[test]
    fn missing_snapshot_is_an_error_after_first_task() {
        let mut rng = Rng::new(7);
        let tasks = gen_glyph_tasks(1, 2, 8, 8, 0.05, 3).unwrap();
        let (x, y) = tasks[0].gather_train(&[0, 1]);
        match mix_batch(None, None, &x, Some(&y), 1, 0.5, &mut rng) {
            Err(ModelError::MissingSnapshot { task: 1 }) => {}
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn ratio_one_keeps_every_slot_fresh() {
        let mut rng = Rng::new(11);
        let tasks = gen_glyph_tasks(2, 2, 8, 8, 0.05, 3).unwrap();
        let teacher = TeacherModel::new(
            {
                let mut c = TeacherConfig::new(vec![1, 8, 8], 4, 2);
                c.gen_arch = Arch::Mlp { hidden: 16 };
                c
            },
            &mut rng,
        );
        let snap = teacher.snapshot(1);
        let (x, y) = tasks[1].gather_train(&[0, 1, 2, 3]);
        // r = 1.0: identical to the fresh batch regardless of the snapshot.
        let batch = mix_batch(Some(&snap), None, &x, Some(&y), 1, 1.0, &mut rng).unwrap();
        assert!(batch.origins.iter().all(|o| *o == Origin::Fresh));
        assert_eq!(batch.x.data(), x.data());
    }

    #[test]
    fn fresh_fraction_converges_to_r() {
        let mut rng = Rng::new(13);
        let tasks = gen_glyph_tasks(2, 2, 8, 8, 0.0, 3).unwrap();
        let mut tcfg = TeacherConfig::new(vec![1, 8, 8], 4, 2);
        tcfg.gen_arch = Arch::Mlp { hidden: 16 };
        let teacher = TeacherModel::new(tcfg, &mut rng);
        let snap = teacher.snapshot(1);
        let n = 100_000;
        let idx: Vec<usize> = (0..n).map(|i| i % tasks[1].train_len()).collect();
        let (x, _) = tasks[1].gather_train(&idx);
        let batch = mix_batch(Some(&snap), None, &x, None, 1, 0.5, &mut rng).unwrap();
        let f = batch.fresh_fraction();
        assert!((0.49..=0.51).contains(&f), "fresh fraction {}", f);
        // Generated slots carry the (only) previous domain.
        for (o, d) in batch.origins.iter().zip(&batch.d) {
            match o {
                Origin::Fresh => assert_eq!(*d, 1),
                Origin::Generated => assert_eq!(*d, 0),
            }
        }
    }

    #[test]
    fn single_task_runs_without_replay_in_every_mode() {
        for mode in [TrainingMode::Supervised, TrainingMode::SemiSupervised, TrainingMode::Unsupervised] {
            let tasks = gen_glyph_tasks(1, 2, 8, 8, 0.05, 5).unwrap();
            let seq = TaskSequence::new(tasks, 0.5).unwrap();
            let cfg = tiny_run_config(mode, 1);
            let mut rng = Rng::new(17);
            let out = lifelong_train(&seq, &cfg, &mut rng).unwrap();
            assert_eq!(out.snapshots.len(), 1);
            assert!(!out.metrics.steps.is_empty());
            assert_eq!(out.metrics.evals.len(), cfg.epochs_per_task);
            assert!(out.metrics.steps.iter().all(|s| s.loss_total.is_finite()));
        }
    }

    #[test]
    fn identical_seeds_give_identical_logs() {
        let tasks = gen_glyph_tasks(2, 2, 6, 8, 0.05, 5).unwrap();
        let seq = TaskSequence::new(tasks, 0.5).unwrap();
        let cfg = tiny_run_config(TrainingMode::Supervised, 2);
        let mut rng_a = Rng::new(23);
        let a = lifelong_train(&seq, &cfg, &mut rng_a).unwrap();
        let mut rng_b = Rng::new(23);
        let b = lifelong_train(&seq, &cfg, &mut rng_b).unwrap();
        assert_eq!(a.metrics.steps_csv(), b.metrics.steps_csv());
        assert_eq!(a.metrics.eval_csv(), b.metrics.eval_csv());
        for ((_, ta), (_, tb)) in a.student.theta1.entries().zip(b.student.theta1.entries()) {
            assert!(ta.data().iter().zip(tb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
        }
    }

    #[test]
    fn mismatched_task_shapes_are_rejected() {
        let mut tasks = gen_glyph_tasks(2, 2, 6, 8, 0.05, 5).unwrap();
        let other = gen_glyph_tasks(1, 2, 6, 12, 0.05, 5).unwrap();
        tasks[1] = other.into_iter().next().unwrap();
        match TaskSequence::new(tasks, 0.5) {
            Err(ModelError::InconsistentInputShape { .. }) => {}
            other => panic!("unexpected {:?}", other.map(|_| ())),
        }
    }
}
