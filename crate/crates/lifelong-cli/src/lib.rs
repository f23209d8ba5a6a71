//! Batch experiment runner: parses a flat config (plus `--key=value`
//! overrides), assembles datasets and model configurations, and dispatches
//! the train / eval / traverse / interpolate / bounds / gen-data
//! subcommands. Exit codes: 0 success, 2 usage, 3 configuration, 4 missing
//! checkpoint, 5 data, 1 runtime.

mod config;

pub use config::{ConfigError, FlatConfig};

use std::path::{Path, PathBuf};

use diffcore::Rng;
use lifelong::checkpoint::{
    restore_student, snapshot_checkpoint, student_checkpoint, teacher_checkpoint, Checkpoint,
};
use lifelong::data::{
    gen_gaussian_mixture_tasks, gen_glyph_tasks, load_manifest, pad_replicate, Manifest,
    TaskDataset, TaskEntry, TaskSource,
};
use lifelong::eval::{
    accuracy_eval, forgetting_curve, interpolate_pair, latent_traversal, nll_eval, write_grid,
};
use lifelong::replay::{lifelong_train, TaskSequence, TrainConfig};
use lifelong::student::{Arch, ReconLikelihood, StudentConfig, StudentModel, TrainingMode};
use lifelong::teacher::{LipschitzMode, TeacherConfig};
use lifelong::theory::run_bound_suite;

pub const EXIT_OK: i32 = 0;
pub const EXIT_RUNTIME: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_CONFIG: i32 = 3;
pub const EXIT_CHECKPOINT: i32 = 4;
pub const EXIT_DATA: i32 = 5;

/// Environment variable holding the default root for relative output dirs.
pub const OUTPUT_ROOT_ENV: &str = "LIFELONG_OUT_ROOT";

const USAGE: &str = "usage: lifelong <train|eval|traverse|interpolate|bounds|gen-data> \
--config <path> [--force] [--key=value ...]";

struct Cli {
    subcommand: String,
    config_path: PathBuf,
    overrides: Vec<(String, String)>,
    checkpoint: Option<PathBuf>,
    force: bool,
}

fn parse_args(args: &[String]) -> Result<Cli, String> {
    if args.is_empty() {
        return Err("missing subcommand".into());
    }
    let subcommand = args[0].clone();
    let known = ["train", "eval", "traverse", "interpolate", "bounds", "gen-data"];
    if !known.contains(&subcommand.as_str()) {
        return Err(format!("unknown subcommand `{}`", subcommand));
    }
    let mut config_path = None;
    let mut checkpoint = None;
    let mut overrides = Vec::new();
    let mut force = false;
    let mut i = 1;
    while i < args.len() {
        let a = &args[i];
        if a == "--config" {
            i += 1;
            config_path = Some(PathBuf::from(args.get(i).ok_or("--config needs a path")?));
        } else if a == "--checkpoint" {
            i += 1;
            checkpoint = Some(PathBuf::from(args.get(i).ok_or("--checkpoint needs a path")?));
        } else if a == "--force" {
            force = true;
        } else if let Some(rest) = a.strip_prefix("--") {
            let (key, value) = rest.split_once('=').ok_or(format!("bad flag `{}`", a))?;
            overrides.push((key.to_string(), value.to_string()));
        } else {
            return Err(format!("unexpected argument `{}`", a));
        }
        i += 1;
    }
    Ok(Cli {
        subcommand,
        config_path: config_path.ok_or("--config is required")?,
        overrides,
        checkpoint,
        force,
    })
}

/// Everything assembled from one configuration.
struct Experiment {
    flat: FlatConfig,
    seed: u64,
    output_dir: PathBuf,
    mode: TrainingMode,
    tasks: Vec<TaskDataset>,
    train: TrainConfig,
    replay_ratio: f64,
    eval_samples: usize,
    bounds_t1: usize,
    bounds_t2: usize,
}

fn parse_arch(
    flat: &mut FlatConfig,
    prefix: &str,
    default_hidden: usize,
) -> Result<Arch, ConfigError> {
    let kind = flat.get_str(&format!("{prefix}.arch"), "auto");
    let hidden = flat.get_usize(&format!("{prefix}.hidden"), default_hidden)?;
    let layers = flat.get_usize(&format!("{prefix}.layers"), 2)?;
    let c1 = flat.get_usize(&format!("{prefix}.c1"), 32)?;
    let c2 = flat.get_usize(&format!("{prefix}.c2"), 64)?;
    match kind.as_str() {
        "auto" => Ok(Arch::Auto),
        "mlp" => Ok(Arch::Mlp { hidden }),
        "mlp_deep" => Ok(Arch::MlpDeep { hidden, layers }),
        "conv" => Ok(Arch::Conv { c1, c2 }),
        _ => Err(ConfigError::BadValue {
            key: format!("{prefix}.arch"),
            value: kind,
            expected: "one of auto|mlp|mlp_deep|conv",
        }),
    }
}

fn build_tasks(flat: &mut FlatConfig, config_dir: &Path) -> Result<Vec<TaskDataset>, String> {
    // Optional resize of image tasks: zero-pad to a square side and
    // replicate the channel (no interpolation).
    let pad_to = flat.get_usize("data.pad_to", 0).map_err(|e| e.to_string())?;
    let channels = flat.get_usize("data.channels", 1).map_err(|e| e.to_string())?;
    let post = move |tasks: Vec<TaskDataset>| -> Result<Vec<TaskDataset>, String> {
        if pad_to == 0 && channels <= 1 {
            return Ok(tasks);
        }
        tasks
            .iter()
            .map(|t| {
                if t.input_shape.len() != 3 {
                    return Err(format!(
                        "data.pad_to/data.channels need image tasks; `{}` has shape {:?}",
                        t.name, t.input_shape
                    ));
                }
                let side = if pad_to == 0 { t.input_shape[1] } else { pad_to };
                if side < t.input_shape[1] || side < t.input_shape[2] {
                    return Err(format!("data.pad_to = {} smaller than `{}`", side, t.name));
                }
                Ok(pad_replicate(t, side, side, channels.max(1)))
            })
            .collect()
    };
    if let Some(manifest) = flat.get_opt("data.manifest") {
        let path = if Path::new(&manifest).is_absolute() {
            PathBuf::from(&manifest)
        } else {
            config_dir.join(&manifest)
        };
        return load_manifest(&path).map_err(|e| e.to_string()).and_then(post);
    }
    let generator = flat.get_str("data.generator", "glyphs");
    let tasks = flat.get_usize("data.tasks", 2).map_err(|e| e.to_string())?;
    let seed = flat.get_u64("data.seed", 17).map_err(|e| e.to_string())?;
    match generator.as_str() {
        "glyphs" => {
            let cpt = flat.get_usize("data.classes_per_task", 3).map_err(|e| e.to_string())?;
            let spc = flat.get_usize("data.samples_per_class", 200).map_err(|e| e.to_string())?;
            let size = flat.get_usize("data.size", 8).map_err(|e| e.to_string())?;
            let noise = flat.get_f64("data.noise", 0.1).map_err(|e| e.to_string())?;
            gen_glyph_tasks(tasks, cpt, spc, size, noise, seed).map_err(|e| e.to_string()).and_then(post)
        }
        "gaussian" => {
            let components = flat.get_usize("data.components", 3).map_err(|e| e.to_string())?;
            let dim = flat.get_usize("data.dim", 2).map_err(|e| e.to_string())?;
            let separation = flat.get_f64("data.separation", 6.0).map_err(|e| e.to_string())?;
            let n = flat.get_usize("data.n", 1000).map_err(|e| e.to_string())?;
            gen_gaussian_mixture_tasks(tasks, components, dim, separation, n, seed)
                .map_err(|e| e.to_string())
                .and_then(post)
        }
        other => Err(format!("data.generator must be glyphs or gaussian, got `{}`", other)),
    }
}

fn assemble(mut flat: FlatConfig, config_dir: &Path) -> Result<Experiment, (i32, String)> {
    let cfgerr = |e: ConfigError| (EXIT_CONFIG, e.to_string());

    let mode = match flat.get_str("mode", "supervised").as_str() {
        "supervised" => TrainingMode::Supervised,
        "semi" => TrainingMode::SemiSupervised,
        "unsupervised" => TrainingMode::Unsupervised,
        other => {
            return Err((
                EXIT_CONFIG,
                format!("mode must be supervised|semi|unsupervised, got `{}`", other),
            ))
        }
    };

    // Profiles pin the objective weights; explicit keys still win.
    let profile = flat.get_str(
        "profile",
        match mode {
            TrainingMode::Supervised => "supervised",
            TrainingMode::SemiSupervised => "semi",
            TrainingMode::Unsupervised => "unsupervised",
        },
    );
    let (p_b1, p_b2, p_b3, p_a) = match profile.as_str() {
        "supervised" => (1.0, 0.01, 0.01, 1.0),
        "semi" => (1.0, 0.01, 0.01, 1.0),
        "unsupervised" => (1.0, 1.0, 0.01, 1.0),
        "disentangle" => (4.0, 1.0, 1.0, 1.0),
        other => {
            return Err((
                EXIT_CONFIG,
                format!(
                    "profile must be supervised|semi|unsupervised|disentangle, got `{}`",
                    other
                ),
            ))
        }
    };

    let seed = flat.get_u64("seed", 7).map_err(cfgerr)?;
    let output_dir = {
        let dir = flat.get_str("output_dir", "out");
        let p = PathBuf::from(&dir);
        if p.is_absolute() {
            p
        } else if let Ok(root) = std::env::var(OUTPUT_ROOT_ENV) {
            PathBuf::from(root).join(p)
        } else {
            config_dir.join(p)
        }
    };

    let tasks = match build_tasks(&mut flat, config_dir) {
        Ok(t) => t,
        Err(message) => return Err((EXIT_DATA, message)),
    };
    let input_shape = tasks[0].input_shape.clone();
    let class_count = tasks[0].class_count;
    let k_tasks = tasks.len();

    let d_z = flat.get_usize("model.d_z", 8).map_err(cfgerr)?;
    let l_m = match flat.get_usize("model.l_m", 0).map_err(cfgerr)? {
        0 => class_count,
        v => v,
    };
    let k_max = match flat.get_usize("model.k_max", 0).map_err(cfgerr)? {
        0 => k_tasks,
        v => v,
    };
    if l_m != class_count {
        return Err((
            EXIT_CONFIG,
            format!("model.l_m = {} does not match the data's {} classes", l_m, class_count),
        ));
    }
    if k_max < k_tasks {
        return Err((
            EXIT_CONFIG,
            format!("model.k_max = {} cannot cover {} tasks", k_max, k_tasks),
        ));
    }

    let mut student = StudentConfig::new(input_shape.clone(), d_z, l_m, k_max);
    student.mode = mode;
    student.arch = parse_arch(&mut flat, "model", 64).map_err(cfgerr)?;
    student.beta1 = config::range_check(
        "model.beta1",
        flat.get_f64("model.beta1", p_b1).map_err(cfgerr)?,
        0.0,
        1e6,
        "[0, 1e6]",
    )
    .map_err(cfgerr)?;
    student.beta2 = config::range_check(
        "model.beta2",
        flat.get_f64("model.beta2", p_b2).map_err(cfgerr)?,
        0.0,
        1e6,
        "[0, 1e6]",
    )
    .map_err(cfgerr)?;
    student.beta3 = config::range_check(
        "model.beta3",
        flat.get_f64("model.beta3", p_b3).map_err(cfgerr)?,
        0.0,
        1e6,
        "[0, 1e6]",
    )
    .map_err(cfgerr)?;
    student.a = config::range_check(
        "model.a",
        flat.get_f64("model.a", p_a).map_err(cfgerr)?,
        0.0,
        1e6,
        "[0, 1e6]",
    )
    .map_err(cfgerr)?;
    student.temperature = config::range_check(
        "model.temperature",
        flat.get_f64("model.temperature", 0.5).map_err(cfgerr)?,
        1e-6,
        100.0,
        "(0, 100]",
    )
    .map_err(cfgerr)?;
    student.adversary_scale = config::range_check(
        "model.adversary_scale",
        flat.get_f64("model.adversary_scale", 1.0).map_err(cfgerr)?,
        0.0,
        1e3,
        "[0, 1e3]",
    )
    .map_err(cfgerr)?;
    student.sigma_prior = config::range_check(
        "model.sigma_prior",
        flat.get_f64("model.sigma_prior", 1.0).map_err(cfgerr)?,
        1e-6,
        1e3,
        "(0, 1e3]",
    )
    .map_err(cfgerr)?;
    student.prior_spacing = config::range_check(
        "model.prior_spacing",
        flat.get_f64("model.prior_spacing", 3.0).map_err(cfgerr)?,
        1e-6,
        1e3,
        "(0, 1e3]",
    )
    .map_err(cfgerr)?;
    student.recon = match flat.get_str("model.recon", "bernoulli").as_str() {
        "bernoulli" => ReconLikelihood::Bernoulli,
        "gaussian" => {
            let sigma = config::range_check(
                "model.recon_sigma",
                flat.get_f64("model.recon_sigma", 0.1).map_err(cfgerr)?,
                1e-6,
                1e3,
                "(0, 1e3]",
            )
            .map_err(cfgerr)?;
            ReconLikelihood::GaussianMse { sigma }
        }
        other => {
            return Err((
                EXIT_CONFIG,
                format!("model.recon must be bernoulli or gaussian, got `{}`", other),
            ))
        }
    };

    let mut teacher = TeacherConfig::new(
        input_shape,
        flat.get_usize("teacher.z_dim", 8).map_err(cfgerr)?,
        k_max,
    );
    teacher.gen_arch = parse_arch(&mut flat, "teacher", 64).map_err(cfgerr)?;
    teacher.critic_hidden = flat.get_usize("teacher.critic_hidden", 64).map_err(cfgerr)?;
    teacher.critic_steps = flat.get_usize("teacher.critic_steps", 5).map_err(cfgerr)?;
    if teacher.critic_steps == 0 {
        return Err((EXIT_CONFIG, "teacher.critic_steps must be >= 1".into()));
    }
    teacher.lipschitz = match flat.get_str("teacher.lipschitz", "clip").as_str() {
        "clip" => LipschitzMode::Clip {
            clip_value: config::range_check(
                "teacher.clip_value",
                flat.get_f64("teacher.clip_value", 0.01).map_err(cfgerr)?,
                1e-9,
                1e3,
                "(0, 1e3]",
            )
            .map_err(cfgerr)?,
        },
        "penalty" => LipschitzMode::Penalty {
            weight: config::range_check(
                "teacher.penalty_weight",
                flat.get_f64("teacher.penalty_weight", 10.0).map_err(cfgerr)?,
                1e-9,
                1e6,
                "(0, 1e6]",
            )
            .map_err(cfgerr)?,
            probe_step: config::range_check(
                "teacher.penalty_probe",
                flat.get_f64("teacher.penalty_probe", 0.05).map_err(cfgerr)?,
                1e-9,
                1.0,
                "(0, 1]",
            )
            .map_err(cfgerr)?,
        },
        other => {
            return Err((
                EXIT_CONFIG,
                format!("teacher.lipschitz must be clip or penalty, got `{}`", other),
            ))
        }
    };

    let labeled_per_class = match flat.get_usize("semi.labeled_per_class", 0).map_err(cfgerr)? {
        0 if mode == TrainingMode::SemiSupervised => {
            return Err((EXIT_CONFIG, "semi mode requires semi.labeled_per_class >= 1".into()))
        }
        v => (v > 0).then_some(v),
    };

    let epochs = flat.get_usize("train.epochs", 10).map_err(cfgerr)?;
    let batch_size = flat.get_usize("train.batch_size", 16).map_err(cfgerr)?;
    if epochs == 0 || batch_size == 0 {
        return Err((EXIT_CONFIG, "train.epochs and train.batch_size must be >= 1".into()));
    }
    let lr = config::range_check(
        "train.lr",
        flat.get_f64("train.lr", 0.001).map_err(cfgerr)?,
        1e-9,
        1.0,
        "(0, 1]",
    )
    .map_err(cfgerr)?;
    let replay_ratio = config::range_check(
        "train.replay_ratio",
        flat.get_f64("train.replay_ratio", 0.5).map_err(cfgerr)?,
        1e-9,
        1.0,
        "(0, 1]",
    )
    .map_err(cfgerr)?;
    let eval_samples = flat.get_usize("eval.samples_per_datum", 64).map_err(cfgerr)?.max(1);
    let bounds_t1 = flat.get_usize("bounds.theorem1_instances", 200).map_err(cfgerr)?;
    let bounds_t2 = flat.get_usize("bounds.theorem2_instances", 100).map_err(cfgerr)?;

    // Figure keys are consumed here so reject_unknown sees them as known.
    let _ = flat.get_usize("traverse.dim", 0).map_err(cfgerr)?;
    let _ = flat.get_f64("traverse.lo", -2.0).map_err(cfgerr)?;
    let _ = flat.get_f64("traverse.hi", 2.0).map_err(cfgerr)?;
    let _ = flat.get_usize("traverse.steps", 8).map_err(cfgerr)?;
    let _ = flat.get_usize("traverse.index", 0).map_err(cfgerr)?;
    let _ = flat.get_usize("traverse.task", 0).map_err(cfgerr)?;
    let _ = flat.get_usize("interpolate.index_a", 0).map_err(cfgerr)?;
    let _ = flat.get_usize("interpolate.index_b", 1).map_err(cfgerr)?;
    let _ = flat.get_usize("interpolate.steps", 10).map_err(cfgerr)?;
    let _ = flat.get_usize("interpolate.task", 0).map_err(cfgerr)?;

    flat.reject_unknown().map_err(cfgerr)?;

    let train = TrainConfig {
        epochs_per_task: epochs,
        batch_size,
        lr,
        student,
        teacher,
        labeled_per_class,
        eval_nll_samples: 1,
    };
    Ok(Experiment {
        flat,
        seed,
        output_dir,
        mode,
        tasks,
        train,
        replay_ratio,
        eval_samples,
        bounds_t1,
        bounds_t2,
    })
}

fn load_experiment(cli: &Cli) -> Result<Experiment, (i32, String)> {
    let text = std::fs::read_to_string(&cli.config_path).map_err(|e| {
        (EXIT_CONFIG, format!("{}: {}", cli.config_path.display(), e))
    })?;
    let mut flat = FlatConfig::parse(&text).map_err(|e| (EXIT_CONFIG, e.to_string()))?;
    for (k, v) in &cli.overrides {
        flat.set(k, v);
    }
    let config_dir = cli.config_path.parent().unwrap_or(Path::new(".")).to_path_buf();
    assemble(flat, &config_dir)
}

fn prepare_output(exp: &Experiment, force: bool) -> Result<(), (i32, String)> {
    let marker = exp.output_dir.join("effective.cfg");
    if marker.exists() && !force {
        return Err((
            EXIT_RUNTIME,
            format!(
                "{} already holds a run (rerun with --force to overwrite)",
                exp.output_dir.display()
            ),
        ));
    }
    std::fs::create_dir_all(&exp.output_dir)
        .map_err(|e| (EXIT_RUNTIME, format!("{}: {}", exp.output_dir.display(), e)))?;
    std::fs::write(&marker, exp.flat.render())
        .map_err(|e| (EXIT_RUNTIME, format!("{}: {}", marker.display(), e)))?;
    Ok(())
}

fn load_student_from(
    exp: &Experiment,
    path: &Path,
) -> Result<StudentModel, (i32, String)> {
    if !path.exists() {
        return Err((EXIT_CHECKPOINT, format!("checkpoint {} does not exist", path.display())));
    }
    let ckpt = Checkpoint::load(path)
        .map_err(|e| (EXIT_CHECKPOINT, format!("{}: {}", path.display(), e)))?;
    let mut model = StudentModel::new(exp.train.student.clone(), &mut Rng::new(exp.seed));
    restore_student(&mut model, &ckpt)
        .map_err(|e| (EXIT_CHECKPOINT, format!("{}: {}", path.display(), e)))?;
    Ok(model)
}

fn cmd_train(exp: &Experiment, force: bool) -> Result<(), (i32, String)> {
    prepare_output(exp, force)?;
    let seq = TaskSequence::new(exp.tasks.clone(), exp.replay_ratio)
        .map_err(|e| (EXIT_DATA, e.to_string()))?;
    let mut rng = Rng::new(exp.seed);
    let out = lifelong_train(&seq, &exp.train, &mut rng).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;

    out.metrics
        .write_all(&exp.output_dir)
        .map_err(|e| (EXIT_RUNTIME, format!("writing metrics: {}", e)))?;
    let curve = forgetting_curve(&out.metrics).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    std::fs::write(exp.output_dir.join("forgetting_curve.csv"), curve.to_csv())
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;

    let echo = exp.flat.render();
    let ckpt_dir = exp.output_dir.join("checkpoints");
    student_checkpoint(&out.student, &echo)
        .save(&ckpt_dir.join("student.ckpt"))
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    teacher_checkpoint(&out.teacher, &echo)
        .save(&ckpt_dir.join("teacher.ckpt"))
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    for snap in &out.snapshots {
        snapshot_checkpoint(snap, &echo)
            .save(&ckpt_dir.join(format!("snapshot_task{}.ckpt", snap.task_count())))
            .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    }

    for (et, task) in exp.tasks.iter().enumerate() {
        let last_epoch = exp.train.epochs_per_task - 1;
        let last_task = exp.tasks.len() - 1;
        if let Some(v) = out.metrics.eval_value(last_task, last_epoch, et) {
            println!("final {} on task {} ({}): {:.2}", curve.metric, et, task.name, v);
        }
    }
    println!("artifacts written to {}", exp.output_dir.display());
    Ok(())
}

fn cmd_eval(exp: &Experiment, cli: &Cli) -> Result<(), (i32, String)> {
    let path = cli
        .checkpoint
        .clone()
        .ok_or((EXIT_USAGE, "eval requires --checkpoint".to_string()))?;
    let model = load_student_from(exp, &path)?;
    let mut rng = Rng::new(exp.seed ^ 0x5EED);
    let mut report = Vec::new();
    for (et, task) in exp.tasks.iter().enumerate() {
        let entry = match exp.mode {
            TrainingMode::Unsupervised => {
                let nll = nll_eval(&model, task, et, exp.eval_samples, &mut rng);
                serde_json::json!({"task": task.name, "nll_nats": nll})
            }
            _ => {
                let acc = accuracy_eval(&model, task).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
                let nll = nll_eval(&model, task, et, exp.eval_samples, &mut rng);
                serde_json::json!({"task": task.name, "accuracy_percent": acc, "nll_nats": nll})
            }
        };
        report.push(entry);
    }
    let text = serde_json::to_string_pretty(&serde_json::json!({ "tasks": report })).unwrap();
    std::fs::create_dir_all(&exp.output_dir).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    std::fs::write(exp.output_dir.join("eval.json"), &text)
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!("{}", text);
    Ok(())
}

fn cmd_traverse(exp: &Experiment, cli: &Cli) -> Result<(), (i32, String)> {
    let path = cli
        .checkpoint
        .clone()
        .ok_or((EXIT_USAGE, "traverse requires --checkpoint".to_string()))?;
    let model = load_student_from(exp, &path)?;
    let mut flat = exp.flat.clone();
    let dim = flat.get_usize("traverse.dim", 0).unwrap();
    let lo = flat.get_f64("traverse.lo", -2.0).unwrap();
    let hi = flat.get_f64("traverse.hi", 2.0).unwrap();
    let steps = flat.get_usize("traverse.steps", 8).unwrap().max(1);
    let index = flat.get_usize("traverse.index", 0).unwrap();
    let task = flat.get_usize("traverse.task", 0).unwrap();
    if task >= exp.tasks.len() || index >= exp.tasks[task].test_len() {
        return Err((EXIT_CONFIG, "traverse.task/index out of range".into()));
    }
    if dim >= exp.train.student.d_z {
        return Err((EXIT_CONFIG, format!("traverse.dim {} out of d_z", dim)));
    }
    let x = diffcore::Tensor::vector(exp.tasks[task].test_row(index));
    let grid = latent_traversal(&model, &x, dim, lo, hi, steps);
    std::fs::create_dir_all(&exp.output_dir).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let out = exp.output_dir.join(format!("traversal_dim{}.pgm", dim));
    write_grid(&grid, &out).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_interpolate(exp: &Experiment, cli: &Cli) -> Result<(), (i32, String)> {
    let path = cli
        .checkpoint
        .clone()
        .ok_or((EXIT_USAGE, "interpolate requires --checkpoint".to_string()))?;
    let model = load_student_from(exp, &path)?;
    let mut flat = exp.flat.clone();
    let a = flat.get_usize("interpolate.index_a", 0).unwrap();
    let b = flat.get_usize("interpolate.index_b", 1).unwrap();
    let steps = flat.get_usize("interpolate.steps", 10).unwrap().max(2);
    let task = flat.get_usize("interpolate.task", 0).unwrap();
    if task >= exp.tasks.len() {
        return Err((EXIT_CONFIG, "interpolate.task out of range".into()));
    }
    let ds = &exp.tasks[task];
    if a >= ds.test_len() || b >= ds.test_len() {
        return Err((EXIT_CONFIG, "interpolate.index_a/b out of range".into()));
    }
    let xa = diffcore::Tensor::vector(ds.test_row(a));
    let xb = diffcore::Tensor::vector(ds.test_row(b));
    let grid = interpolate_pair(&model, &xa, &xb, steps);
    std::fs::create_dir_all(&exp.output_dir).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let out = exp.output_dir.join("interpolation.pgm");
    write_grid(&grid, &out).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!("wrote {}", out.display());
    Ok(())
}

fn cmd_bounds(exp: &Experiment) -> Result<(), (i32, String)> {
    let suite = run_bound_suite(exp.seed, exp.bounds_t1, exp.bounds_t2);
    std::fs::create_dir_all(&exp.output_dir).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    let path = exp.output_dir.join("bounds.json");
    std::fs::write(&path, serde_json::to_string_pretty(&suite).unwrap())
        .map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!(
        "single-task bound: {}/{} hold; accumulated: {}/{} hold; recursion max error {:.2e}",
        suite.theorem1_instances - suite.theorem1_violations,
        suite.theorem1_instances,
        suite.theorem2_instances - suite.theorem2_violations,
        suite.theorem2_instances,
        suite.recursion_max_abs_error
    );
    println!("wrote {}", path.display());
    if suite.all_hold {
        Ok(())
    } else {
        Err((EXIT_RUNTIME, "bound violations found (see bounds.json)".into()))
    }
}

fn cmd_gen_data(exp: &Experiment, force: bool) -> Result<(), (i32, String)> {
    prepare_output(exp, force)?;
    let mut flat = exp.flat.clone();
    let generator = flat.get_str("data.generator", "glyphs");
    let tasks = flat.get_usize("data.tasks", 2).unwrap();
    let seed = flat.get_u64("data.seed", 17).unwrap();
    let entries: Vec<TaskEntry> = (0..tasks)
        .map(|i| TaskEntry {
            name: format!("{}-{}", generator, i),
            source: match generator.as_str() {
                "gaussian" => TaskSource::Gaussian {
                    task_count: tasks,
                    components: flat.get_usize("data.components", 3).unwrap(),
                    dim: flat.get_usize("data.dim", 2).unwrap(),
                    separation: flat.get_f64("data.separation", 6.0).unwrap(),
                    n: flat.get_usize("data.n", 1000).unwrap(),
                    seed,
                    task_index: i,
                },
                _ => TaskSource::Glyphs {
                    task_count: tasks,
                    classes_per_task: flat.get_usize("data.classes_per_task", 3).unwrap(),
                    samples_per_class: flat.get_usize("data.samples_per_class", 200).unwrap(),
                    size: flat.get_usize("data.size", 8).unwrap(),
                    noise: flat.get_f64("data.noise", 0.1).unwrap(),
                    seed,
                    task_index: i,
                },
            },
        })
        .collect();
    let manifest = Manifest { tasks: entries };
    let path = exp.output_dir.join("manifest.json");
    std::fs::write(&path, manifest.to_json()).map_err(|e| (EXIT_RUNTIME, e.to_string()))?;
    println!("wrote {}", path.display());
    Ok(())
}

/// Parses arguments and runs the requested subcommand; returns the exit code.
pub fn run(args: &[String]) -> i32 {
    let cli = match parse_args(args) {
        Ok(c) => c,
        Err(message) => {
            eprintln!("error: {}", message);
            eprintln!("{}", USAGE);
            return EXIT_USAGE;
        }
    };
    let exp = match load_experiment(&cli) {
        Ok(e) => e,
        Err((code, message)) => {
            eprintln!("error: {}", message);
            return code;
        }
    };
    let result = match cli.subcommand.as_str() {
        "train" => cmd_train(&exp, cli.force),
        "eval" => cmd_eval(&exp, &cli),
        "traverse" => cmd_traverse(&exp, &cli),
        "interpolate" => cmd_interpolate(&exp, &cli),
        "bounds" => cmd_bounds(&exp),
        "gen-data" => cmd_gen_data(&exp, cli.force),
        _ => unreachable!("subcommand validated"),
    };
    match result {
        Ok(()) => EXIT_OK,
        Err((code, message)) => {
            eprintln!("error: {}", message);
            code
        }
    }
}
