//! JSON dataset manifest: the unit the command line consumes. Each task
//! names either an IDX file quadruple or one task of a deterministic
//! generator run; relative paths resolve against the manifest's directory.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::DataError;

use super::{gen_gaussian_mixture_tasks, gen_glyph_tasks, load_idx, TaskDataset};

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub tasks: Vec<TaskEntry>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TaskEntry {
    pub name: String,
    pub source: TaskSource,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskSource {
    Idx {
        train_images: String,
        train_labels: String,
        test_images: String,
        test_labels: String,
        classes: usize,
    },
    Glyphs {
        task_count: usize,
        classes_per_task: usize,
        samples_per_class: usize,
        size: usize,
        noise: f64,
        seed: u64,
        task_index: usize,
    },
    Gaussian {
        task_count: usize,
        components: usize,
        dim: usize,
        separation: f64,
        n: usize,
        seed: u64,
        task_index: usize,
    },
}

fn resolve(base: &Path, rel: &str) -> PathBuf {
    let p = Path::new(rel);
    if p.is_absolute() {
        p.to_path_buf()
    } else {
        base.join(p)
    }
}

impl Manifest {
    pub fn from_json(text: &str) -> Result<Manifest, DataError> {
        serde_json::from_str(text)
            .map_err(|e| DataError::Io { path: "<manifest>".into(), message: e.to_string() })
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("manifest serializes")
    }
}

/// Reads a manifest file and materializes every task in order.
pub fn load_manifest(path: &Path) -> Result<Vec<TaskDataset>, DataError> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| DataError::Io { path: path.display().to_string(), message: e.to_string() })?;
    let manifest = Manifest::from_json(&text)?;
    let base = path.parent().unwrap_or(Path::new(".")).to_path_buf();
    let mut out = Vec::with_capacity(manifest.tasks.len());
    for entry in &manifest.tasks {
        let ds = match &entry.source {
            TaskSource::Idx { train_images, train_labels, test_images, test_labels, classes } => {
                let train = load_idx(&resolve(&base, train_images), &resolve(&base, train_labels))?;
                let test = load_idx(&resolve(&base, test_images), &resolve(&base, test_labels))?;
                TaskDataset::new(
                    entry.name.clone(),
                    vec![1, train.rows, train.cols],
                    train.inputs,
                    train.labels,
                    test.inputs,
                    test.labels,
                    *classes,
                )
            }
            TaskSource::Glyphs {
                task_count,
                classes_per_task,
                samples_per_class,
                size,
                noise,
                seed,
                task_index,
            } => {
                let mut tasks = gen_glyph_tasks(
                    *task_count,
                    *classes_per_task,
                    *samples_per_class,
                    *size,
                    *noise,
                    *seed,
                )?;
                assert!(*task_index < tasks.len(), "task_index out of range");
                let mut ds = tasks.swap_remove(*task_index);
                ds.name = entry.name.clone();
                ds
            }
            TaskSource::Gaussian { task_count, components, dim, separation, n, seed, task_index } => {
                let mut tasks = gen_gaussian_mixture_tasks(
                    *task_count,
                    *components,
                    *dim,
                    *separation,
                    *n,
                    *seed,
                )?;
                assert!(*task_index < tasks.len(), "task_index out of range");
                let mut ds = tasks.swap_remove(*task_index);
                ds.name = entry.name.clone();
                ds
            }
        };
        out.push(ds);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_round_trip_and_generation() {
        let manifest = Manifest {
            tasks: (0..2)
                .map(|i| TaskEntry {
                    name: format!("g{}", i),
                    source: TaskSource::Glyphs {
                        task_count: 2,
                        classes_per_task: 2,
                        samples_per_class: 8,
                        size: 8,
                        noise: 0.05,
                        seed: 77,
                        task_index: i,
                    },
                })
                .collect(),
        };
        let json = manifest.to_json();
        let parsed = Manifest::from_json(&json).unwrap();
        assert_eq!(parsed.tasks.len(), 2);

        let mut path = std::env::temp_dir();
        path.push(format!("manifest-test-{}.json", std::process::id()));
        std::fs::write(&path, json).unwrap();
        let tasks = load_manifest(&path).unwrap();
        assert_eq!(tasks.len(), 2);
        assert_eq!(tasks[0].name, "g0");
        assert_eq!(tasks[0].class_count, 2);
        // The two tasks draw on disjoint alphabets, so their templates differ.
        assert_ne!(tasks[0].train_inputs.data()[..64], tasks[1].train_inputs.data()[..64]);
        let _ = std::fs::remove_file(path);
    }

    #[test]
    fn malformed_manifest_is_an_io_error() {
        match Manifest::from_json("{ not json") {
            Err(DataError::Io { .. }) => {}
            other => panic!("unexpected {:?}", other),
        }
    }
}
