//! Synthetic task distributions, task embeddings, and data augmentation.
//!
//! Two families: `blobs` (few-shot Gaussian-cluster classification in the
//! plane) and `sine` (amplitude/phase regression, MAML-style). The task
//! embedding is the concatenation of per-class support-input means and
//! elementwise variances, a deterministic architecture-free stand-in for a
//! learned feature extractor.

use std::f64::consts::{PI, TAU};

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::{Batch, Targets};
use crate::rng;

pub const BLOBS_STD: f64 = 0.5;
pub const BLOBS_MEAN_RANGE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TaskFamily {
    Blobs,
    Sine,
}

/// One few-shot task: disjoint support and query sets plus the seed that
/// regenerates it.
#[derive(Clone, Debug)]
pub struct TaskInstance {
    pub family: TaskFamily,
    pub support: Batch,
    pub query: Batch,
    pub n_way: usize,
    pub k_shot: usize,
    pub task_seed: u64,
    /// True cluster means for blobs tasks; used by the harness to select
    /// separable tasks.
    pub blob_means: Option<Vec<Vec<f64>>>,
}

impl TaskInstance {
    pub fn input_dim(&self) -> usize {
        self.support.input_dim()
    }

    /// Smallest pairwise distance between cluster means (blobs only).
    pub fn min_cluster_separation(&self) -> Option<f64> {
        let means = self.blob_means.as_ref()?;
        let mut min = f64::INFINITY;
        for a in 0..means.len() {
            for b in (a + 1)..means.len() {
                let d: f64 = means[a]
                    .iter()
                    .zip(means[b].iter())
                    .map(|(x, y)| (x - y) * (x - y))
                    .sum::<f64>()
                    .sqrt();
                min = min.min(d);
            }
        }
        Some(min)
    }
}

/// Fixed-length conditioning vector summarizing a task's support set.
#[derive(Clone, Debug, PartialEq)]
pub struct TaskEmbedding {
    pub values: Vec<f64>,
}

impl TaskEmbedding {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Embedding length for a family/arity: n_way * 2 * input_dim.
pub fn embedding_dim(family: TaskFamily, n_way: usize) -> usize {
    let input_dim = match family {
        TaskFamily::Blobs => 2,
        TaskFamily::Sine => 1,
    };
    n_way * 2 * input_dim
}

/// Samples one task. Deterministic given `task_seed`; `query_per_class`
/// query samples are drawn per class so the query set is balanced.
pub fn sample_task(
    family: TaskFamily,
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    task_seed: u64,
) -> Result<TaskInstance> {
    if n_way == 0 || k_shot == 0 || query_per_class == 0 {
        return Err(Error::arg("task parameters must be positive"));
    }
    let mut rng = rng::seeded(task_seed);
    match family {
        TaskFamily::Blobs => sample_blobs(n_way, k_shot, query_per_class, task_seed, &mut rng),
        TaskFamily::Sine => {
            if n_way != 1 {
                return Err(Error::arg("sine tasks are single-class (n_way = 1)"));
            }
            sample_sine(k_shot, query_per_class, task_seed, &mut rng)
        }
    }
}

fn sample_blobs(
    n_way: usize,
    k_shot: usize,
    query_per_class: usize,
    task_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstance> {
    let means: Vec<Vec<f64>> = (0..n_way)
        .map(|_| {
            vec![
                rng.random_range(-BLOBS_MEAN_RANGE..BLOBS_MEAN_RANGE),
                rng.random_range(-BLOBS_MEAN_RANGE..BLOBS_MEAN_RANGE),
            ]
        })
        .collect();

    let draw_set = |per_class: usize, rng: &mut ChaCha8Rng| {
        let mut inputs = Vec::with_capacity(n_way * per_class);
        let mut labels = Vec::with_capacity(n_way * per_class);
        for (class, mean) in means.iter().enumerate() {
            for _ in 0..per_class {
                inputs.push(vec![
                    mean[0] + BLOBS_STD * rng::standard_normal(rng),
                    mean[1] + BLOBS_STD * rng::standard_normal(rng),
                ]);
                labels.push(class);
            }
        }
        Batch {
            inputs,
            targets: Targets::Classes(labels),
        }
    };

    let support = draw_set(k_shot, rng);
    let query = draw_set(query_per_class, rng);
    Ok(TaskInstance {
        family: TaskFamily::Blobs,
        support,
        query,
        n_way,
        k_shot,
        task_seed,
        blob_means: Some(means),
    })
}

fn sample_sine(
    k_shot: usize,
    query_per_class: usize,
    task_seed: u64,
    rng: &mut ChaCha8Rng,
) -> Result<TaskInstance> {
    let amplitude = rng.random_range(0.1..5.0);
    let phase = rng.random_range(0.0..PI);

    let draw_set = |count: usize, rng: &mut ChaCha8Rng| {
        let mut inputs = Vec::with_capacity(count);
        let mut values = Vec::with_capacity(count);
        for _ in 0..count {
            let x = rng.random_range(-5.0..5.0);
            inputs.push(vec![x]);
            values.push(vec![amplitude * (x + phase).sin()]);
        }
        Batch {
            inputs,
            targets: Targets::Values(values),
        }
    };

    let support = draw_set(k_shot, rng);
    let query = draw_set(query_per_class, rng);
    Ok(TaskInstance {
        family: TaskFamily::Sine,
        support,
        query,
        n_way: 1,
        k_shot,
        task_seed,
        blob_means: None,
    })
}

/// Concatenated per-class mean and per-class (population) elementwise
/// variance of the support inputs, classes in label order. Pure and
/// deterministic; invariant to within-class sample order.
pub fn embed_task(task: &TaskInstance) -> Result<TaskEmbedding> {
    if task.support.is_empty() {
        return Err(Error::Empty("task support set".into()));
    }
    let input_dim = task.support.input_dim();
    let n_way = task.n_way;

    // Group support rows per class; for sine everything is class 0.
    let mut per_class: Vec<Vec<&Vec<f64>>> = vec![Vec::new(); n_way];
    match &task.support.targets {
        Targets::Classes(labels) => {
            for (row, &label) in task.support.inputs.iter().zip(labels.iter()) {
                if label >= n_way {
                    return Err(Error::arg(format!("label {label} out of range")));
                }
                per_class[label].push(row);
            }
        }
        Targets::Values(_) => {
            for row in &task.support.inputs {
                per_class[0].push(row);
            }
        }
    }

    let mut values = Vec::with_capacity(n_way * 2 * input_dim);
    for (class, rows) in per_class.iter_mut().enumerate() {
        if rows.is_empty() {
            return Err(Error::Empty(format!("class {class} has no support samples")));
        }
        // Accumulate in a canonical row order so the embedding is bitwise
        // invariant to within-class sample order.
        rows.sort_by(|a, b| {
            for (x, y) in a.iter().zip(b.iter()) {
                match x.total_cmp(y) {
                    std::cmp::Ordering::Equal => continue,
                    ord => return ord,
                }
            }
            a.len().cmp(&b.len())
        });
        let n = rows.len() as f64;
        let mut mean = vec![0.0; input_dim];
        for row in rows.iter() {
            for (m, x) in mean.iter_mut().zip(row.iter()) {
                *m += x;
            }
        }
        for m in &mut mean {
            *m /= n;
        }
        let mut var = vec![0.0; input_dim];
        for row in rows.iter() {
            for ((v, x), m) in var.iter_mut().zip(row.iter()).zip(mean.iter()) {
                *v += (x - m) * (x - m);
            }
        }
        for v in &mut var {
            *v /= n;
        }
        values.extend(mean);
        values.extend(var);
    }

    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("task embedding".into()));
    }
    Ok(TaskEmbedding { values })
}

/// Rotates every 2-D input by `angle` radians around the origin.
pub fn rotate_batch(batch: &Batch, angle: f64) -> Result<Batch> {
    if batch.input_dim() != 2 {
        return Err(Error::arg(format!(
            "rotation needs 2-D inputs, got dim {}",
            batch.input_dim()
        )));
    }
    let (sin, cos) = angle.sin_cos();
    let inputs = batch
        .inputs
        .iter()
        .map(|p| vec![cos * p[0] - sin * p[1], sin * p[0] + cos * p[1]])
        .collect();
    Ok(Batch {
        inputs,
        targets: batch.targets.clone(),
    })
}

/// Data augmentation: one random whole-batch rotation (2-D inputs only)
/// followed by i.i.d. Gaussian input noise. Labels pass through unchanged.
/// Consumes no randomness for parts that are disabled, so disabling both
/// leaves the rng stream untouched.
pub fn augment(
    batch: &Batch,
    noise_std: f64,
    rotate: bool,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    if noise_std < 0.0 {
        return Err(Error::arg("noise_std must be nonnegative"));
    }
    let mut out = if rotate {
        if batch.input_dim() != 2 {
            return Err(Error::arg(
                "rotate=true requires 2-dimensional inputs",
            ));
        }
        let angle = rng.random_range(0.0..TAU);
        rotate_batch(batch, angle)?
    } else {
        batch.clone()
    };
    if noise_std > 0.0 {
        for row in &mut out.inputs {
            for x in row.iter_mut() {
                *x += noise_std * rng::standard_normal(rng);
            }
        }
    }
    Ok(out)
}
