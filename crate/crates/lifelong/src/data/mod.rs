//! Dataset ingestion and synthesis: IDX readers/writers, procedural task
//! generators for desk-scale experiments, and semi-supervised label splits.

mod gaussian;
mod glyphs;
mod idx;
mod manifest;

pub use gaussian::gen_gaussian_mixture_tasks;
pub use glyphs::{gen_glyph_tasks, glyph_template, ALPHABET_SIZE};
pub use idx::{load_idx, write_idx_images, write_idx_labels, DatasetPart, IDX_IMAGE_MAGIC, IDX_LABEL_MAGIC};
pub use manifest::{load_manifest, Manifest, TaskEntry, TaskSource};

use diffcore::{Rng, Tensor};

use crate::error::DataError;

/// One task's data: flat train/test matrices plus per-sample shape.
#[derive(Debug, Clone)]
pub struct TaskDataset {
    pub name: String,
    /// Per-sample shape: [channels, height, width] for images, [dim] for vectors.
    pub input_shape: Vec<usize>,
    pub train_inputs: Tensor,
    pub train_labels: Vec<usize>,
    pub test_inputs: Tensor,
    pub test_labels: Vec<usize>,
    pub class_count: usize,
}

impl TaskDataset {
    pub fn new(
        name: String,
        input_shape: Vec<usize>,
        train_inputs: Tensor,
        train_labels: Vec<usize>,
        test_inputs: Tensor,
        test_labels: Vec<usize>,
        class_count: usize,
    ) -> Self {
        let d: usize = input_shape.iter().product();
        assert_eq!(train_inputs.shape(), &[train_labels.len(), d], "train shape mismatch");
        assert_eq!(test_inputs.shape(), &[test_labels.len(), d], "test shape mismatch");
        assert!(
            train_inputs.data().iter().chain(test_inputs.data()).all(|v| (0.0..=1.0).contains(v)),
            "inputs must lie in [0, 1]"
        );
        assert!(
            train_labels.iter().chain(&test_labels).all(|l| *l < class_count),
            "labels must be < class_count"
        );
        TaskDataset {
            name,
            input_shape,
            train_inputs,
            train_labels,
            test_inputs,
            test_labels,
            class_count,
        }
    }

    pub fn sample_dim(&self) -> usize {
        self.input_shape.iter().product()
    }

    pub fn train_len(&self) -> usize {
        self.train_labels.len()
    }

    pub fn test_len(&self) -> usize {
        self.test_labels.len()
    }

    /// Rows of the training matrix selected by index, as a [n, D] batch.
    pub fn gather_train(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        self.gather(&self.train_inputs, &self.train_labels, indices)
    }

    pub fn gather_test(&self, indices: &[usize]) -> (Tensor, Vec<usize>) {
        self.gather(&self.test_inputs, &self.test_labels, indices)
    }

    fn gather(&self, from: &Tensor, labels: &[usize], indices: &[usize]) -> (Tensor, Vec<usize>) {
        let d = self.sample_dim();
        let mut data = Vec::with_capacity(indices.len() * d);
        let mut lab = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(&from.data()[i * d..(i + 1) * d]);
            lab.push(labels[i]);
        }
        (Tensor::new(vec![indices.len(), d], data), lab)
    }

    /// One training sample as a flat row.
    pub fn train_row(&self, i: usize) -> &[f64] {
        let d = self.sample_dim();
        &self.train_inputs.data()[i * d..(i + 1) * d]
    }

    pub fn test_row(&self, i: usize) -> &[f64] {
        let d = self.sample_dim();
        &self.test_inputs.data()[i * d..(i + 1) * d]
    }
}

/// Zero-pads image tasks to `h x w` (content centered) and replicates the
/// single channel `channels` times, so native grayscale files can feed a
/// larger multi-channel input shape without interpolation.
pub fn pad_replicate(ds: &TaskDataset, h: usize, w: usize, channels: usize) -> TaskDataset {
    let [c0, h0, w0] = match ds.input_shape.as_slice() {
        [c, h, w] => [*c, *h, *w],
        other => panic!("pad_replicate needs image-shaped tasks, got {:?}", other),
    };
    assert_eq!(c0, 1, "pad_replicate starts from single-channel images");
    assert!(h >= h0 && w >= w0, "target {}x{} smaller than source {}x{}", h, w, h0, w0);
    assert!(channels >= 1);
    let (top, left) = ((h - h0) / 2, (w - w0) / 2);
    let convert = |inputs: &Tensor, n: usize| -> Tensor {
        let mut out = vec![0.0; n * channels * h * w];
        for i in 0..n {
            for y in 0..h0 {
                for x in 0..w0 {
                    let v = inputs.data()[i * h0 * w0 + y * w0 + x];
                    for ch in 0..channels {
                        out[((i * channels + ch) * h + top + y) * w + left + x] = v;
                    }
                }
            }
        }
        Tensor::new(vec![n, channels * h * w], out)
    };
    TaskDataset::new(
        ds.name.clone(),
        vec![channels, h, w],
        convert(&ds.train_inputs, ds.train_len()),
        ds.train_labels.clone(),
        convert(&ds.test_inputs, ds.test_len()),
        ds.test_labels.clone(),
        ds.class_count,
    )
}

/// Index partition of one task's training set for semi-supervised runs.
#[derive(Debug, Clone)]
pub struct SemiSplit {
    pub labeled: Vec<usize>,
    pub unlabeled: Vec<usize>,
}

/// Class-balanced labeled subset: exactly `labeled_per_class` indices per
/// class, the remainder unlabeled; deterministic per seed.
pub fn split_semi(ds: &TaskDataset, labeled_per_class: usize, seed: u64) -> Result<SemiSplit, DataError> {
    let mut rng = Rng::new(seed);
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); ds.class_count];
    for (i, &y) in ds.train_labels.iter().enumerate() {
        by_class[y].push(i);
    }
    for (c, members) in by_class.iter().enumerate() {
        if members.len() < labeled_per_class {
            return Err(DataError::InsufficientSamples {
                class: c,
                have: members.len(),
                need: labeled_per_class,
            });
        }
    }
    let mut labeled = Vec::with_capacity(labeled_per_class * ds.class_count);
    let mut unlabeled = Vec::new();
    for mut members in by_class {
        rng.shuffle(&mut members);
        labeled.extend_from_slice(&members[..labeled_per_class]);
        unlabeled.extend_from_slice(&members[labeled_per_class..]);
    }
    labeled.sort_unstable();
    unlabeled.sort_unstable();
    Ok(SemiSplit { labeled, unlabeled })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny_dataset() -> TaskDataset {
        let train: Vec<f64> = (0..20).map(|i| (i % 2) as f64).collect();
        let labels = vec![0, 1, 0, 1, 0, 1, 0, 1, 0, 1];
        TaskDataset::new(
            "tiny".into(),
            vec![2],
            Tensor::new(vec![10, 2], train),
            labels,
            Tensor::new(vec![2, 2], vec![0.0, 1.0, 1.0, 0.0]),
            vec![0, 1],
            2,
        )
    }

    #[test]
    fn generators_fuzzed_over_random_configs() {
        // TaskDataset::new validates the [0,1] range and label bounds on
        // every construction; this drives both generators across a spread
        // of random configurations.
        let mut rng = diffcore::Rng::new(99);
        for i in 0..500 {
            let tasks = 1 + rng.below(3);
            let cpt = 1 + rng.below(3);
            let spc = 1 + rng.below(6);
            let size = 6 + rng.below(6);
            let noise = rng.uniform_in(0.0, 0.5);
            let out = gen_glyph_tasks(tasks, cpt, spc, size, noise, i).unwrap();
            assert_eq!(out.len(), tasks);
        }
        for i in 0..500 {
            let tasks = 1 + rng.below(3);
            let comps = 1 + rng.below(4);
            let dim = 1 + rng.below(4);
            let sep = rng.uniform_in(0.5, 8.0);
            let n = comps + rng.below(40);
            let out = gen_gaussian_mixture_tasks(tasks, comps, dim, sep, n, i).unwrap();
            assert_eq!(out.len(), tasks);
        }
    }

    #[test]
    fn pad_replicate_centers_and_replicates() {
        let ds = TaskDataset::new(
            "img".into(),
            vec![1, 2, 2],
            Tensor::new(vec![1, 4], vec![0.1, 0.2, 0.3, 0.4]),
            vec![0],
            Tensor::new(vec![1, 4], vec![0.4, 0.3, 0.2, 0.1]),
            vec![0],
            1,
        );
        let padded = pad_replicate(&ds, 4, 4, 3);
        assert_eq!(padded.input_shape, vec![3, 4, 4]);
        assert_eq!(padded.train_inputs.shape(), &[1, 48]);
        // Content centered at rows/cols 1..3, identical across channels.
        for ch in 0..3 {
            let base = ch * 16;
            assert_eq!(padded.train_inputs.data()[base + 4 + 1], 0.1);
            assert_eq!(padded.train_inputs.data()[base + 4 + 2], 0.2);
            assert_eq!(padded.train_inputs.data()[base + 8 + 1], 0.3);
            assert_eq!(padded.train_inputs.data()[base], 0.0);
        }
    }

    #[test]
    fn split_semi_partitions_and_balances() {
        let ds = tiny_dataset();
        let split = split_semi(&ds, 2, 9).unwrap();
        assert_eq!(split.labeled.len(), 4);
        assert_eq!(split.unlabeled.len(), 6);
        let mut all: Vec<usize> = split.labeled.iter().chain(&split.unlabeled).cloned().collect();
        all.sort_unstable();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
        // Class balance.
        for c in 0..2 {
            let count = split.labeled.iter().filter(|&&i| ds.train_labels[i] == c).count();
            assert_eq!(count, 2);
        }
        // Full class size -> empty unlabeled set.
        let full = split_semi(&ds, 5, 9).unwrap();
        assert!(full.unlabeled.is_empty());
        // Deterministic per seed.
        let again = split_semi(&ds, 2, 9).unwrap();
        assert_eq!(split.labeled, again.labeled);
        // Insufficient samples are an error naming the class.
        match split_semi(&ds, 6, 9) {
            Err(DataError::InsufficientSamples { need: 6, .. }) => {}
            other => panic!("unexpected {:?}", other),
        }
    }
}
