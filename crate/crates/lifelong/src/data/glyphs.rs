//! Procedural glyph tasks: 26 stroke-drawn letter templates, partitioned
//! across tasks so task domains are disjoint. Samples are the class template
//! with one-pixel jitter and independent pixel flips.

use diffcore::{Rng, Tensor};

use crate::error::DataError;

use super::TaskDataset;

pub const ALPHABET_SIZE: usize = 26;

/// Line segments in the unit square (x right, y down), one list per letter.
fn strokes(letter: usize) -> &'static [(f64, f64, f64, f64)] {
    const A: &[(f64, f64, f64, f64)] = &[(0.0, 1.0, 0.5, 0.0), (0.5, 0.0, 1.0, 1.0), (0.22, 0.6, 0.78, 0.6)];
    const B: &[(f64, f64, f64, f64)] = &[
        (0.0, 0.0, 0.0, 1.0),
        (0.0, 0.0, 0.8, 0.12),
        (0.8, 0.12, 0.0, 0.48),
        (0.0, 0.48, 0.9, 0.72),
        (0.9, 0.72, 0.0, 1.0),
    ];
    const C: &[(f64, f64, f64, f64)] = &[
        (1.0, 0.12, 0.3, 0.0),
        (0.3, 0.0, 0.0, 0.5),
        (0.0, 0.5, 0.3, 1.0),
        (0.3, 1.0, 1.0, 0.88),
    ];
    const D: &[(f64, f64, f64, f64)] = &[
        (0.0, 0.0, 0.0, 1.0),
        (0.0, 0.0, 0.72, 0.2),
        (0.72, 0.2, 0.72, 0.8),
        (0.72, 0.8, 0.0, 1.0),
    ];
    const E: &[(f64, f64, f64, f64)] = &[
        (1.0, 0.0, 0.0, 0.0),
        (0.0, 0.0, 0.0, 1.0),
        (0.0, 1.0, 1.0, 1.0),
        (0.0, 0.5, 0.7, 0.5),
    ];
    const F: &[(f64, f64, f64, f64)] =
        &[(1.0, 0.0, 0.0, 0.0), (0.0, 0.0, 0.0, 1.0), (0.0, 0.5, 0.7, 0.5)];
    const G: &[(f64, f64, f64, f64)] = &[
        (1.0, 0.1, 0.25, 0.0),
        (0.25, 0.0, 0.0, 0.5),
        (0.0, 0.5, 0.25, 1.0),
        (0.25, 1.0, 1.0, 0.9),
        (1.0, 0.9, 1.0, 0.6),
        (1.0, 0.6, 0.55, 0.6),
    ];
    const H: &[(f64, f64, f64, f64)] =
        &[(0.0, 0.0, 0.0, 1.0), (1.0, 0.0, 1.0, 1.0), (0.0, 0.5, 1.0, 0.5)];
    const I: &[(f64, f64, f64, f64)] =
        &[(0.5, 0.0, 0.5, 1.0), (0.2, 0.0, 0.8, 0.0), (0.2, 1.0, 0.8, 1.0)];
    const J: &[(f64, f64, f64, f64)] =
        &[(1.0, 0.0, 1.0, 0.78), (1.0, 0.78, 0.5, 1.0), (0.5, 1.0, 0.0, 0.78)];
    const K: &[(f64, f64, f64, f64)] =
        &[(0.0, 0.0, 0.0, 1.0), (1.0, 0.0, 0.0, 0.5), (0.0, 0.5, 1.0, 1.0)];
    const L: &[(f64, f64, f64, f64)] = &[(0.0, 0.0, 0.0, 1.0), (0.0, 1.0, 1.0, 1.0)];
    const M: &[(f64, f64, f64, f64)] = &[
        (0.0, 1.0, 0.0, 0.0),
        (0.0, 0.0, 0.5, 0.55),
        (0.5, 0.55, 1.0, 0.0),
        (1.0, 0.0, 1.0, 1.0),
    ];
    const N: &[(f64, f64, f64, f64)] =
        &[(0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 1.0), (1.0, 1.0, 1.0, 0.0)];
    const O: &[(f64, f64, f64, f64)] = &[
        (0.5, 0.0, 0.0, 0.3),
        (0.0, 0.3, 0.0, 0.7),
        (0.0, 0.7, 0.5, 1.0),
        (0.5, 1.0, 1.0, 0.7),
        (1.0, 0.7, 1.0, 0.3),
        (1.0, 0.3, 0.5, 0.0),
    ];
    const P: &[(f64, f64, f64, f64)] =
        &[(0.0, 1.0, 0.0, 0.0), (0.0, 0.0, 1.0, 0.14), (1.0, 0.14, 0.0, 0.45)];
    const Q: &[(f64, f64, f64, f64)] = &[
        (0.5, 0.0, 0.0, 0.3),
        (0.0, 0.3, 0.0, 0.7),
        (0.0, 0.7, 0.5, 1.0),
        (0.5, 1.0, 1.0, 0.7),
        (1.0, 0.7, 1.0, 0.3),
        (1.0, 0.3, 0.5, 0.0),
        (0.6, 0.62, 1.0, 1.0),
    ];
    const R: &[(f64, f64, f64, f64)] = &[
        (0.0, 1.0, 0.0, 0.0),
        (0.0, 0.0, 1.0, 0.14),
        (1.0, 0.14, 0.0, 0.45),
        (0.0, 0.45, 1.0, 1.0),
    ];
    const S: &[(f64, f64, f64, f64)] = &[
        (1.0, 0.1, 0.2, 0.0),
        (0.2, 0.0, 0.0, 0.28),
        (0.0, 0.28, 1.0, 0.7),
        (1.0, 0.7, 0.78, 1.0),
        (0.78, 1.0, 0.0, 0.9),
    ];
    const T: &[(f64, f64, f64, f64)] = &[(0.0, 0.0, 1.0, 0.0), (0.5, 0.0, 0.5, 1.0)];
    const U: &[(f64, f64, f64, f64)] = &[
        (0.0, 0.0, 0.0, 0.78),
        (0.0, 0.78, 0.5, 1.0),
        (0.5, 1.0, 1.0, 0.78),
        (1.0, 0.78, 1.0, 0.0),
    ];
    const V: &[(f64, f64, f64, f64)] = &[(0.0, 0.0, 0.5, 1.0), (0.5, 1.0, 1.0, 0.0)];
    const W: &[(f64, f64, f64, f64)] = &[
        (0.0, 0.0, 0.25, 1.0),
        (0.25, 1.0, 0.5, 0.42),
        (0.5, 0.42, 0.75, 1.0),
        (0.75, 1.0, 1.0, 0.0),
    ];
    const X: &[(f64, f64, f64, f64)] = &[(0.0, 0.0, 1.0, 1.0), (1.0, 0.0, 0.0, 1.0)];
    const Y: &[(f64, f64, f64, f64)] =
        &[(0.0, 0.0, 0.5, 0.5), (1.0, 0.0, 0.5, 0.5), (0.5, 0.5, 0.5, 1.0)];
    const Z: &[(f64, f64, f64, f64)] =
        &[(0.0, 0.0, 1.0, 0.0), (1.0, 0.0, 0.0, 1.0), (0.0, 1.0, 1.0, 1.0)];
    const ALL: [&[(f64, f64, f64, f64)]; 26] = [
        A, B, C, D, E, F, G, H, I, J, K, L, M, N, O, P, Q, R, S, T, U, V, W, X, Y, Z,
    ];
    ALL[letter]
}

fn draw_line(grid: &mut [f64], size: usize, x0: f64, y0: f64, x1: f64, y1: f64) {
    // Supersampled walk along the segment; robust at any raster size.
    let scale = (size - 1) as f64;
    let steps = 4 * size;
    for i in 0..=steps {
        let t = i as f64 / steps as f64;
        let x = (x0 + t * (x1 - x0)) * scale;
        let y = (y0 + t * (y1 - y0)) * scale;
        let xi = x.round() as usize;
        let yi = y.round() as usize;
        grid[yi.min(size - 1) * size + xi.min(size - 1)] = 1.0;
    }
}

/// The clean binary template for one alphabet letter at a given raster size.
pub fn glyph_template(letter: usize, size: usize) -> Vec<f64> {
    assert!(letter < ALPHABET_SIZE, "letter {} out of alphabet", letter);
    assert!(size >= 6, "glyphs need size >= 6");
    let mut grid = vec![0.0; size * size];
    for &(x0, y0, x1, y1) in strokes(letter) {
        draw_line(&mut grid, size, x0, y0, x1, y1);
    }
    grid
}

/// Template shifted by (dx, dy) pixels with zero fill.
pub(crate) fn jitter(template: &[f64], size: usize, dx: i64, dy: i64) -> Vec<f64> {
    let mut out = vec![0.0; size * size];
    for y in 0..size as i64 {
        for x in 0..size as i64 {
            let sx = x - dx;
            let sy = y - dy;
            if sx >= 0 && sx < size as i64 && sy >= 0 && sy < size as i64 {
                out[(y * size as i64 + x) as usize] = template[(sy * size as i64 + sx) as usize];
            }
        }
    }
    out
}

fn perturbed_sample(template: &[f64], size: usize, noise: f64, rng: &mut Rng) -> Vec<f64> {
    let dx = rng.below(3) as i64 - 1;
    let dy = rng.below(3) as i64 - 1;
    let mut sample = jitter(template, size, dx, dy);
    if noise > 0.0 {
        for v in sample.iter_mut() {
            if rng.uniform() < noise {
                *v = 1.0 - *v;
            }
        }
    }
    sample
}

/// Generates `task_count` tasks over disjoint letter alphabets. Each class
/// contributes `samples_per_class` training samples and a quarter as many
/// (at least one) test samples. Deterministic per seed.
pub fn gen_glyph_tasks(
    task_count: usize,
    classes_per_task: usize,
    samples_per_class: usize,
    size: usize,
    noise: f64,
    seed: u64,
) -> Result<Vec<TaskDataset>, DataError> {
    assert!(task_count >= 1 && classes_per_task >= 1 && samples_per_class >= 1);
    assert!(size >= 6, "glyphs need size >= 6");
    assert!((0.0..=1.0).contains(&noise));
    if task_count * classes_per_task > ALPHABET_SIZE {
        return Err(DataError::AlphabetExceeded {
            requested: task_count * classes_per_task,
            available: ALPHABET_SIZE,
        });
    }
    let mut rng = Rng::new(seed);
    let test_per_class = (samples_per_class / 4).max(1);
    let dim = size * size;
    let mut tasks = Vec::with_capacity(task_count);
    for t in 0..task_count {
        let mut train = Vec::with_capacity(classes_per_task * samples_per_class * dim);
        let mut train_labels = Vec::new();
        let mut test = Vec::with_capacity(classes_per_task * test_per_class * dim);
        let mut test_labels = Vec::new();
        for c in 0..classes_per_task {
            let letter = t * classes_per_task + c;
            let template = glyph_template(letter, size);
            for _ in 0..samples_per_class {
                train.extend_from_slice(&perturbed_sample(&template, size, noise, &mut rng));
                train_labels.push(c);
            }
            for _ in 0..test_per_class {
                test.extend_from_slice(&perturbed_sample(&template, size, noise, &mut rng));
                test_labels.push(c);
            }
        }
        let n_train = train_labels.len();
        let n_test = test_labels.len();
        tasks.push(TaskDataset::new(
            format!("glyphs-{}", t),
            vec![1, size, size],
            Tensor::new(vec![n_train, dim], train),
            train_labels,
            Tensor::new(vec![n_test, dim], test),
            test_labels,
            classes_per_task,
        ));
    }
    Ok(tasks)
}
