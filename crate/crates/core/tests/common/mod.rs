//! Independent f64 reference implementations shared by the integration tests.
#![allow(dead_code)]

use meatlab::diffnet::{Layer, Model, ModelSpec, NamedParams};
use meatlab::numcore::{RngState, Tensor};

pub const EPS: f64 = 1e-5;

/// BatchNorm behaviour of the reference forward pass.
pub enum BnMode<'a> {
    /// Normalize by the batch's own biased statistics.
    Batch,
    /// Normalize by fixed `(mean, var)` per BatchNorm layer, in order.
    Fixed(&'a [(Vec<f64>, Vec<f64>)]),
}

pub fn to_f64(params: &NamedParams) -> Vec<Vec<f64>> {
    params
        .tensors()
        .map(|t| t.data().iter().map(|&v| f64::from(v)).collect())
        .collect()
}

pub fn rows_f64(x: &Tensor) -> Vec<Vec<f64>> {
    let (n, _) = x.dims2().unwrap();
    (0..n)
        .map(|i| x.row(i).iter().map(|&v| f64::from(v)).collect())
        .collect()
}

/// Straight-line forward pass in f64. Also returns the pre-normalization
/// activations seen by each BatchNorm layer.
pub fn forward(
    spec: &ModelSpec,
    params: &[Vec<f64>],
    x: &[Vec<f64>],
    bn: BnMode<'_>,
) -> (Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>) {
    let mut h: Vec<Vec<f64>> = x.to_vec();
    let mut p = 0;
    let mut bn_index = 0;
    let mut bn_inputs = Vec::new();
    for layer in spec.resolve().unwrap() {
        match layer {
            Layer::Dense {
                fan_in, fan_out, ..
            } => {
                let (w, b) = (&params[p], &params[p + 1]);
                h = h
                    .iter()
                    .map(|row| {
                        (0..fan_out)
                            .map(|o| {
                                b[o] + (0..fan_in).map(|i| w[o * fan_in + i] * row[i]).sum::<f64>()
                            })
                            .collect()
                    })
                    .collect();
                p += 2;
            }
            Layer::Relu { .. } => {
                h = h
                    .iter()
                    .map(|r| r.iter().map(|v| v.max(0.0)).collect())
                    .collect();
            }
            Layer::BatchNorm { dim, .. } => {
                let (g, b) = (&params[p], &params[p + 1]);
                let n = h.len() as f64;
                let (mean, var): (Vec<f64>, Vec<f64>) = match &bn {
                    BnMode::Batch => (0..dim)
                        .map(|j| {
                            let m = h.iter().map(|r| r[j]).sum::<f64>() / n;
                            let v = h.iter().map(|r| (r[j] - m).powi(2)).sum::<f64>() / n;
                            (m, v)
                        })
                        .unzip(),
                    BnMode::Fixed(stats) => stats[bn_index].clone(),
                };
                bn_inputs.push(h.clone());
                h = h
                    .iter()
                    .map(|r| {
                        (0..dim)
                            .map(|j| g[j] * (r[j] - mean[j]) / (var[j] + EPS).sqrt() + b[j])
                            .collect()
                    })
                    .collect();
                bn_index += 1;
                p += 2;
            }
        }
    }
    (h, bn_inputs)
}

pub fn xent(logits: &[Vec<f64>], labels: &[usize]) -> f64 {
    let total: f64 = logits
        .iter()
        .zip(labels)
        .map(|(row, &y)| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            lse - row[y]
        })
        .sum();
    total / labels.len() as f64
}

/// Default-architecture model whose BatchNorm affine parameters and running
/// statistics are also randomized, so that no layer starts at identity.
pub fn random_model(input_dim: usize, classes: usize, seed: u64) -> Model {
    let mut rng = RngState::new(seed);
    let mut m = Model::init(ModelSpec::default_mlp(input_dim, classes), &mut rng).unwrap();
    let tensors: Vec<Tensor> = m
        .params
        .iter()
        .map(|e| {
            if e.layer.starts_with("bn") {
                let (lo, hi) = if e.name == "weight" {
                    (0.5, 1.5)
                } else {
                    (-0.3, 0.3)
                };
                rng.uniform_tensor(e.tensor.shape(), lo, hi)
            } else if e.name == "bias" {
                rng.uniform_tensor(e.tensor.shape(), -0.2, 0.2)
            } else {
                e.tensor.clone()
            }
        })
        .collect();
    m.params = m.params.with_tensors(tensors).unwrap();
    for l in &mut m.bn.layers {
        l.mean = rng.uniform_tensor(l.mean.shape(), -0.5, 0.5);
        l.var = rng.uniform_tensor(l.var.shape(), 0.5, 2.0);
    }
    m
}

pub fn random_labels(rng: &mut RngState, n: usize, classes: usize) -> Vec<usize> {
    (0..n).map(|_| rng.below(classes)).collect()
}
