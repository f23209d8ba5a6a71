//! Gaussian-mixture vector tasks: per task, well-separated unit-covariance
//! components on an integer lattice scaled by the separation, labels by
//! component, inputs affinely rescaled to [0, 1] per dimension.

use diffcore::{Rng, Tensor};

use crate::error::DataError;

use super::TaskDataset;

fn lattice_point(index: usize, dim: usize, side: usize) -> Vec<f64> {
    let mut coords = Vec::with_capacity(dim);
    let mut rem = index;
    for _ in 0..dim {
        coords.push((rem % side) as f64);
        rem /= side;
    }
    coords
}

pub fn gen_gaussian_mixture_tasks(
    task_count: usize,
    components: usize,
    dim: usize,
    separation: f64,
    n: usize,
    seed: u64,
) -> Result<Vec<TaskDataset>, DataError> {
    assert!(task_count >= 1 && components >= 1 && dim >= 1);
    assert!(separation > 0.0, "separation must be positive");
    if n < components {
        return Err(DataError::InsufficientSamples { class: 0, have: n, need: components });
    }
    let mut rng = Rng::new(seed);
    let side = (components as f64).powf(1.0 / dim as f64).ceil() as usize;
    let side = side.max(2);
    let n_test = (n / 4).max(components);
    let mut tasks = Vec::with_capacity(task_count);
    for t in 0..task_count {
        // A task-specific offset keeps different task indices on different means.
        let offset: Vec<f64> = (0..dim).map(|_| rng.uniform_in(0.0, separation)).collect();
        let means: Vec<Vec<f64>> = (0..components)
            .map(|c| {
                lattice_point(c, dim, side)
                    .iter()
                    .zip(&offset)
                    .map(|(l, o)| separation * l + o)
                    .collect()
            })
            .collect();

        let draw = |count: usize, rng: &mut Rng| {
            let mut data = Vec::with_capacity(count * dim);
            let mut labels = Vec::with_capacity(count);
            for _ in 0..count {
                let c = rng.below(components);
                for j in 0..dim {
                    data.push(means[c][j] + rng.normal());
                }
                labels.push(c);
            }
            (data, labels)
        };
        let (mut train, train_labels) = draw(n, &mut rng);
        let (mut test, test_labels) = draw(n_test, &mut rng);

        // Affine rescale to [0, 1] per dimension over both splits.
        for j in 0..dim {
            let mut lo = f64::INFINITY;
            let mut hi = f64::NEG_INFINITY;
            for row in 0..n {
                lo = lo.min(train[row * dim + j]);
                hi = hi.max(train[row * dim + j]);
            }
            for row in 0..n_test {
                lo = lo.min(test[row * dim + j]);
                hi = hi.max(test[row * dim + j]);
            }
            let span = (hi - lo).max(1e-12);
            for row in 0..n {
                train[row * dim + j] = (train[row * dim + j] - lo) / span;
            }
            for row in 0..n_test {
                test[row * dim + j] = (test[row * dim + j] - lo) / span;
            }
        }

        tasks.push(TaskDataset::new(
            format!("gaussians-{}", t),
            vec![dim],
            Tensor::new(vec![n, dim], train),
            train_labels,
            Tensor::new(vec![n_test, dim], test),
            test_labels,
            components,
        ));
    }
    Ok(tasks)
}
