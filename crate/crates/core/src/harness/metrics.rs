//! Evaluation metrics and their CSV form.

use std::io::Write;

use crate::error::Result;
use crate::nn::{self, Batch, NetworkSpec, OutputHead};
use crate::vector::WeightVector;

/// Aggregated evaluation of one variant over the eval task set.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsRecord {
    pub variant: String,
    pub k: usize,
    pub t_steps: usize,
    pub seed: u64,
    /// ||x_T − θ_M||²/D averaged over eval tasks.
    pub recon_mse: f64,
    /// Per-readout ||x_{iT/k} − θ_{i·d}||²/D, i = 1..k.
    pub readout_mse: Vec<f64>,
    /// Query accuracy (classification) or query MSE (regression).
    pub query_metric: f64,
    /// Denoiser forward passes per generated chain (latency proxy); T for
    /// chain-generated weights, 0 for weights that need no denoiser.
    pub denoiser_evals: u64,
}

/// CSV header with readout columns up to `max_k`.
pub fn metrics_csv_header(max_k: usize) -> String {
    let mut cols = vec![
        "variant".to_string(),
        "k".to_string(),
        "T".to_string(),
        "seed".to_string(),
        "recon_mse".to_string(),
    ];
    for i in 1..=max_k {
        cols.push(format!("readout_mse_{i}"));
    }
    cols.push("query_metric".to_string());
    cols.push("denoiser_evals".to_string());
    cols.join(",")
}

pub fn write_metrics_csv<W: Write>(records: &[MetricsRecord], mut out: W) -> Result<()> {
    let max_k = records.iter().map(|r| r.k).max().unwrap_or(1);
    writeln!(out, "{}", metrics_csv_header(max_k))?;
    for r in records {
        let mut cols = vec![
            r.variant.clone(),
            r.k.to_string(),
            r.t_steps.to_string(),
            r.seed.to_string(),
            format!("{}", r.recon_mse),
        ];
        for i in 0..max_k {
            cols.push(
                r.readout_mse
                    .get(i)
                    .map(|v| format!("{v}"))
                    .unwrap_or_default(),
            );
        }
        cols.push(format!("{}", r.query_metric));
        cols.push(r.denoiser_evals.to_string());
        writeln!(out, "{}", cols.join(","))?;
    }
    Ok(())
}

/// Fraction of query samples whose argmax logit matches the label, or the
/// mean squared error for regression heads.
pub fn query_metric(spec: &NetworkSpec, weights: &WeightVector, query: &Batch) -> Result<f64> {
    match spec.output_head {
        OutputHead::SoftmaxCrossEntropy => {
            let outputs = nn::forward(spec, weights, &query.inputs)?;
            let labels = query
                .class_labels()
                .ok_or_else(|| crate::error::Error::arg("classification query needs labels"))?;
            let correct = outputs
                .iter()
                .zip(labels.iter())
                .filter(|(o, &l)| {
                    let mut best = 0;
                    for (i, v) in o.iter().enumerate() {
                        if *v > o[best] {
                            best = i;
                        }
                    }
                    best == l
                })
                .count();
            Ok(correct as f64 / labels.len() as f64)
        }
        OutputHead::MeanSquaredError => nn::task_loss(spec, weights, query),
        OutputHead::Linear => Err(crate::error::Error::arg(
            "linear head has no query metric",
        )),
    }
}

pub fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        return f64::NAN;
    }
    values.iter().sum::<f64>() / values.len() as f64
}

pub fn std_dev(values: &[f64]) -> f64 {
    if values.len() < 2 {
        return 0.0;
    }
    let m = mean(values);
    (values.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (values.len() - 1) as f64).sqrt()
}
