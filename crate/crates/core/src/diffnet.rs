//! A small feed-forward classifier (dense / ReLU / BatchNorm) with softmax
//! cross-entropy and exact reverse-mode gradients for parameters and inputs.

use serde::{Deserialize, Serialize};

use crate::error::{argument, usage, Error, Result};
use crate::numcore::{RngState, Tensor};

/// Running-statistics momentum used by train-mode BatchNorm.
pub const BN_MOMENTUM: f64 = 0.1;
/// Variance offset inside BatchNorm normalization.
pub const BN_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense { units: usize },
    Relu,
    BatchNorm,
}

/// Architecture description. Layer names are derived from positions:
/// `dense{i}`, `relu{i}`, `bn{i}`.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub input_dim: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerSpec>,
}

/// A layer with its dimensions resolved.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum Layer {
    Dense {
        name: String,
        fan_in: usize,
        fan_out: usize,
    },
    Relu {
        name: String,
    },
    BatchNorm {
        name: String,
        dim: usize,
    },
}

impl Layer {
    pub fn name(&self) -> &str {
        match self {
            Layer::Dense { name, .. } | Layer::Relu { name } | Layer::BatchNorm { name, .. } => {
                name
            }
        }
    }
}

impl ModelSpec {
    /// `d – [dense – (BN) – ReLU]* – dense – C`.
    pub fn mlp(input_dim: usize, hidden: &[usize], num_classes: usize, batchnorm: bool) -> Self {
        let mut layers = Vec::new();
        for &h in hidden {
            layers.push(LayerSpec::Dense { units: h });
            if batchnorm {
                layers.push(LayerSpec::BatchNorm);
            }
            layers.push(LayerSpec::Relu);
        }
        layers.push(LayerSpec::Dense { units: num_classes });
        ModelSpec {
            input_dim,
            num_classes,
            layers,
        }
    }

    /// The default network: `d–64–BN–ReLU–64–BN–ReLU–C`.
    pub fn default_mlp(input_dim: usize, num_classes: usize) -> Self {
        Self::mlp(input_dim, &[64, 64], num_classes, true)
    }

    pub fn resolve(&self) -> Result<Vec<Layer>> {
        if self.input_dim == 0 {
            return Err(argument("model input_dim must be positive"));
        }
        if self.num_classes == 0 {
            return Err(argument("model num_classes must be positive"));
        }
        let mut dim = self.input_dim;
        let mut out = Vec::with_capacity(self.layers.len());
        for (i, l) in self.layers.iter().enumerate() {
            out.push(match *l {
                LayerSpec::Dense { units } => {
                    if units == 0 {
                        return Err(argument(format!("layer {i}: dense units must be positive")));
                    }
                    let layer = Layer::Dense {
                        name: format!("dense{i}"),
                        fan_in: dim,
                        fan_out: units,
                    };
                    dim = units;
                    layer
                }
                LayerSpec::Relu => Layer::Relu {
                    name: format!("relu{i}"),
                },
                LayerSpec::BatchNorm => Layer::BatchNorm {
                    name: format!("bn{i}"),
                    dim,
                },
            });
        }
        if dim != self.num_classes {
            return Err(argument(format!(
                "final layer width {dim} differs from class count {}",
                self.num_classes
            )));
        }
        Ok(out)
    }

    /// Name of the last dense layer (the classifier head).
    pub fn last_dense(&self) -> Option<String> {
        self.layers
            .iter()
            .rposition(|l| matches!(l, LayerSpec::Dense { .. }))
            .map(|i| format!("dense{i}"))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub layer: String,
    pub name: String,
    pub tensor: Tensor,
}

impl ParamTensor {
    pub fn key(&self) -> String {
        format!("{}.{}", self.layer, self.name)
    }
}

/// Ordered `(layer, tensor-name) → tensor` map in architecture order.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct NamedParams {
    entries: Vec<ParamTensor>,
}

impl NamedParams {
    pub fn new(entries: Vec<ParamTensor>) -> Result<Self> {
        for (i, e) in entries.iter().enumerate() {
            if entries[..i]
                .iter()
                .any(|o| o.layer == e.layer && o.name == e.name)
            {
                return Err(argument(format!("duplicate parameter name {}", e.key())));
            }
        }
        Ok(NamedParams { entries })
    }

    pub fn entries(&self) -> &[ParamTensor] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = &ParamTensor> {
        self.entries.iter()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, layer: &str, name: &str) -> Option<&Tensor> {
        self.entries
            .iter()
            .find(|e| e.layer == layer && e.name == name)
            .map(|e| &e.tensor)
    }

    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.entries.iter().map(|e| &e.tensor)
    }

    pub fn num_coordinates(&self) -> usize {
        self.entries.iter().map(|e| e.tensor.len()).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        crate::numcore::frobenius_norm_concat(self.tensors())
    }

    /// Same names, same shapes, same order.
    pub fn check_aligned(&self, other: &NamedParams) -> Result<()> {
        if self.entries.len() != other.entries.len() {
            return Err(usage(format!(
                "parameter sets not aligned: {} vs {} tensors",
                self.entries.len(),
                other.entries.len()
            )));
        }
        for (a, b) in self.entries.iter().zip(&other.entries) {
            if a.layer != b.layer || a.name != b.name || a.tensor.shape() != b.tensor.shape() {
                return Err(usage(format!(
                    "parameter sets not aligned: {} {:?} vs {} {:?}",
                    a.key(),
                    a.tensor.shape(),
                    b.key(),
                    b.tensor.shape()
                )));
            }
        }
        Ok(())
    }

    /// Same layout with new payloads, one per entry.
    pub fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<NamedParams> {
        if tensors.len() != self.entries.len() {
            return Err(usage("payload count differs from parameter layout"));
        }
        let entries = self
            .entries
            .iter()
            .zip(tensors)
            .map(|(e, t)| {
                e.tensor.check_same_shape(&t, "parameter payload")?;
                Ok(ParamTensor {
                    layer: e.layer.clone(),
                    name: e.name.clone(),
                    tensor: t,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(NamedParams { entries })
    }

    pub fn map(&self, f: impl Fn(f32) -> f32) -> NamedParams {
        NamedParams {
            entries: self
                .entries
                .iter()
                .map(|e| ParamTensor {
                    layer: e.layer.clone(),
                    name: e.name.clone(),
                    tensor: e.tensor.map(&f),
                })
                .collect(),
        }
    }

    /// Elementwise combination of two aligned parameter sets.
    pub fn zip_with(
        &self,
        other: &NamedParams,
        f: impl Fn(f32, f32) -> f32,
    ) -> Result<NamedParams> {
        self.check_aligned(other)?;
        let tensors = self
            .entries
            .iter()
            .zip(&other.entries)
            .map(|(a, b)| a.tensor.zip_map(&b.tensor, &f))
            .collect::<Result<Vec<_>>>()?;
        self.with_tensors(tensors)
    }

    /// All coordinates in layout order.
    pub fn flatten(&self) -> Vec<f32> {
        self.tensors()
            .flat_map(|t| t.data().iter().copied())
            .collect()
    }

    pub fn bit_eq(&self, other: &NamedParams) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.layer == b.layer && a.name == b.name && a.tensor.bit_eq(&b.tensor))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BnLayerStats {
    pub layer: String,
    pub mean: Tensor,
    pub var: Tensor,
}

/// Running statistics of every BatchNorm layer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct BnStats {
    pub layers: Vec<BnLayerStats>,
    pub num_batches: u64,
}

impl BnStats {
    pub fn get(&self, layer: &str) -> Option<&BnLayerStats> {
        self.layers.iter().find(|l| l.layer == layer)
    }

    pub fn bit_eq(&self, other: &BnStats) -> bool {
        self.num_batches == other.num_batches
            && self.layers.len() == other.layers.len()
            && self
                .layers
                .iter()
                .zip(&other.layers)
                .all(|(a, b)| a.layer == b.layer && a.mean.bit_eq(&b.mean) && a.var.bit_eq(&b.var))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Fresh parameters. Dense weights are `N(0, 1/fan_in)` with zero biases;
/// BatchNorm starts as the identity with unit running variance.
pub fn init_params(spec: &ModelSpec, rng: &mut RngState) -> Result<(NamedParams, BnStats)> {
    let layers = spec.resolve()?;
    let mut entries = Vec::new();
    let mut stats = Vec::new();
    for layer in &layers {
        match layer {
            Layer::Dense {
                name,
                fan_in,
                fan_out,
            } => {
                let scale = (1.0 / (*fan_in as f64).sqrt()) as f32;
                entries.push(ParamTensor {
                    layer: name.clone(),
                    name: "weight".into(),
                    tensor: rng.gaussian(&[*fan_out, *fan_in]).scale(scale),
                });
                entries.push(ParamTensor {
                    layer: name.clone(),
                    name: "bias".into(),
                    tensor: Tensor::zeros(&[*fan_out]),
                });
            }
            Layer::BatchNorm { name, dim } => {
                entries.push(ParamTensor {
                    layer: name.clone(),
                    name: "weight".into(),
                    tensor: Tensor::full(&[*dim], 1.0),
                });
                entries.push(ParamTensor {
                    layer: name.clone(),
                    name: "bias".into(),
                    tensor: Tensor::zeros(&[*dim]),
                });
                stats.push(BnLayerStats {
                    layer: name.clone(),
                    mean: Tensor::zeros(&[*dim]),
                    var: Tensor::full(&[*dim], 1.0),
                });
            }
            Layer::Relu { .. } => {}
        }
    }
    Ok((
        NamedParams::new(entries)?,
        BnStats {
            layers: stats,
            num_batches: 0,
        },
    ))
}

/// Parameters and running statistics bound to their architecture.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub spec: ModelSpec,
    pub params: NamedParams,
    pub bn: BnStats,
}

impl Model {
    pub fn init(spec: ModelSpec, rng: &mut RngState) -> Result<Self> {
        let (params, bn) = init_params(&spec, rng)?;
        Ok(Model { spec, params, bn })
    }

    pub fn forward(&self, x: &Tensor, mode: Mode) -> Result<Forward> {
        forward(&self.spec, &self.params, &self.bn, x, mode)
    }

    /// Eval-mode logits.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        Ok(self.forward(x, Mode::Eval)?.logits)
    }

    /// Eval-mode mean cross-entropy.
    pub fn loss(&self, x: &Tensor, labels: &[usize]) -> Result<f64> {
        loss_xent(&self.logits(x)?, labels)
    }
}

#[derive(Clone, Debug)]
enum LayerCache {
    Dense {
        param_index: usize,
        input: Tensor,
        weight: Tensor,
    },
    Relu {
        input: Tensor,
    },
    BatchNorm {
        param_index: usize,
        xhat: Tensor,
        inv_std: Vec<f64>,
        gamma: Vec<f32>,
        mode: Mode,
    },
}

/// Everything `backward` needs from one forward call.
#[derive(Clone, Debug)]
pub struct Cache {
    layers: Vec<LayerCache>,
    layout: NamedParams,
    logits: Tensor,
    input_shape: Vec<usize>,
}

impl Cache {
    pub fn logits(&self) -> &Tensor {
        &self.logits
    }
}

#[derive(Clone, Debug)]
pub struct Forward {
    pub logits: Tensor,
    pub cache: Cache,
    /// Updated running statistics; `Some` only in train mode.
    pub bnstats: Option<BnStats>,
}

fn check_params(layers: &[Layer], params: &NamedParams) -> Result<()> {
    let mut expected = Vec::new();
    for l in layers {
        match l {
            Layer::Dense {
                name,
                fan_in,
                fan_out,
            } => {
                expected.push((name.as_str(), "weight", vec![*fan_out, *fan_in]));
                expected.push((name.as_str(), "bias", vec![*fan_out]));
            }
            Layer::BatchNorm { name, dim } => {
                expected.push((name.as_str(), "weight", vec![*dim]));
                expected.push((name.as_str(), "bias", vec![*dim]));
            }
            Layer::Relu { .. } => {}
        }
    }
    if expected.len() != params.len()
        || expected
            .iter()
            .zip(params.iter())
            .any(|((l, n, s), p)| p.layer != *l || p.name != *n || p.tensor.shape() != s.as_slice())
    {
        return Err(usage("parameters do not match the model architecture"));
    }
    Ok(())
}

/// Per-column mean and biased variance, accumulated in f64.
pub(crate) fn column_moments(x: &Tensor) -> Result<(Vec<f64>, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let mut mean = vec![0f64; d];
    for i in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(i)) {
            *m += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0f64; d];
    for i in 0..n {
        for ((s, &v), m) in var.iter_mut().zip(x.row(i)).zip(&mean) {
            let c = f64::from(v) - m;
            *s += c * c;
        }
    }
    var.iter_mut().for_each(|s| *s /= n as f64);
    Ok((mean, var))
}

pub(crate) fn dense_forward(x: &Tensor, weight: &Tensor, bias: &Tensor) -> Result<Tensor> {
    let mut y = x.matmul_bt(weight)?;
    let (_, out) = y.dims2()?;
    for (i, v) in y.data_mut().iter_mut().enumerate() {
        *v += bias.data()[i % out];
    }
    Ok(y)
}

pub(crate) fn relu_forward(x: &Tensor) -> Tensor {
    x.map(|v| if v > 0.0 { v } else { 0.0 })
}

/// Normalize columns with the given statistics, then scale and shift.
/// Returns `(output, xhat, inv_std)`.
pub(crate) fn bn_apply(
    x: &Tensor,
    mean: &[f64],
    var: &[f64],
    gamma: &[f32],
    beta: &[f32],
) -> Result<(Tensor, Tensor, Vec<f64>)> {
    let (n, d) = x.dims2()?;
    let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
    let mut xhat = vec![0f32; n * d];
    let mut out = vec![0f32; n * d];
    for i in 0..n {
        for j in 0..d {
            let h = (f64::from(x.data()[i * d + j]) - mean[j]) * inv_std[j];
            xhat[i * d + j] = h as f32;
            out[i * d + j] = (f64::from(gamma[j]) * h + f64::from(beta[j])) as f32;
        }
    }
    Ok((
        Tensor::new(vec![n, d], out)?,
        Tensor::new(vec![n, d], xhat)?,
        inv_std,
    ))
}

pub fn forward(
    spec: &ModelSpec,
    params: &NamedParams,
    bn: &BnStats,
    x: &Tensor,
    mode: Mode,
) -> Result<Forward> {
    let layers = spec.resolve()?;
    check_params(&layers, params)?;
    let (_, d) = x.dims2()?;
    if d != spec.input_dim {
        return Err(Error::Dimension {
            context: "model input",
            left: x.shape().to_vec(),
            right: vec![spec.input_dim],
        });
    }
    let mut new_bn = (mode == Mode::Train).then(|| bn.clone());
    let mut caches = Vec::with_capacity(layers.len());
    let mut h = x.clone();
    let mut p = 0usize;
    for layer in &layers {
        match layer {
            Layer::Dense { .. } => {
                let w = &params.entries()[p].tensor;
                let b = &params.entries()[p + 1].tensor;
                let y = dense_forward(&h, w, b)?;
                caches.push(LayerCache::Dense {
                    param_index: p,
                    input: h,
                    weight: w.clone(),
                });
                h = y;
                p += 2;
            }
            Layer::Relu { .. } => {
                let y = relu_forward(&h);
                caches.push(LayerCache::Relu { input: h });
                h = y;
            }
            Layer::BatchNorm { name, .. } => {
                let gamma = params.entries()[p].tensor.data();
                let beta = params.entries()[p + 1].tensor.data();
                let stats = bn
                    .get(name)
                    .ok_or_else(|| usage(format!("missing BatchNorm statistics for {name}")))?;
                let (y, xhat, inv_std) = match mode {
                    Mode::Train => {
                        let (mean, var) = column_moments(&h)?;
                        let (y, xhat, inv_std) = bn_apply(&h, &mean, &var, gamma, beta)?;
                        let n = h.dims2()?.0;
                        let unbias = if n > 1 {
                            n as f64 / (n - 1) as f64
                        } else {
                            1.0
                        };
                        let running = new_bn
                            .as_mut()
                            .and_then(|s| s.layers.iter_mut().find(|l| &l.layer == name))
                            .expect("train mode clones statistics");
                        for (j, (rm, rv)) in running
                            .mean
                            .data_mut()
                            .iter_mut()
                            .zip(running.var.data_mut().iter_mut())
                            .enumerate()
                        {
                            *rm = ((1.0 - BN_MOMENTUM) * f64::from(*rm) + BN_MOMENTUM * mean[j])
                                as f32;
                            *rv = ((1.0 - BN_MOMENTUM) * f64::from(*rv)
                                + BN_MOMENTUM * var[j] * unbias)
                                as f32;
                        }
                        (y, xhat, inv_std)
                    }
                    Mode::Eval => {
                        let mean: Vec<f64> =
                            stats.mean.data().iter().map(|&v| f64::from(v)).collect();
                        let var: Vec<f64> =
                            stats.var.data().iter().map(|&v| f64::from(v)).collect();
                        bn_apply(&h, &mean, &var, gamma, beta)?
                    }
                };
                caches.push(LayerCache::BatchNorm {
                    param_index: p,
                    xhat,
                    inv_std,
                    gamma: gamma.to_vec(),
                    mode,
                });
                h = y;
                p += 2;
            }
        }
    }
    if let Some(s) = new_bn.as_mut() {
        s.num_batches += 1;
    }
    Ok(Forward {
        logits: h.clone(),
        cache: Cache {
            layers: caches,
            layout: params.clone(),
            logits: h,
            input_shape: x.shape().to_vec(),
        },
        bnstats: new_bn,
    })
}

fn check_labels(labels: &[usize], rows: usize, classes: usize) -> Result<()> {
    if labels.len() != rows {
        return Err(usage(format!(
            "{} labels for a batch of {rows}",
            labels.len()
        )));
    }
    if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
        return Err(argument(format!("label {bad} out of range [0, {classes})")));
    }
    Ok(())
}

/// Row-wise softmax in f64.
fn softmax_row(row: &[f32]) -> Vec<f64> {
    let m = row
        .iter()
        .fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
    let e: Vec<f64> = row.iter().map(|&v| (f64::from(v) - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|v| v / s).collect()
}

/// Mean softmax cross-entropy, max-subtracted.
pub fn loss_xent(logits: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, c) = logits.dims2()?;
    check_labels(labels, n, c)?;
    let total: f64 = (0..n)
        .map(|i| {
            let row = logits.row(i);
            let m = row
                .iter()
                .fold(f64::NEG_INFINITY, |a, &v| a.max(f64::from(v)));
            let lse = m + row
                .iter()
                .map(|&v| (f64::from(v) - m).exp())
                .sum::<f64>()
                .ln();
            (lse - f64::from(row[labels[i]])).max(0.0)
        })
        .sum();
    Ok(total / n as f64)
}

#[derive(Clone, Debug)]
pub struct Gradients {
    pub params: NamedParams,
    pub input: Tensor,
}

fn loss_grad(cache: &Cache, labels: &[usize]) -> Result<Tensor> {
    let (n, c) = cache.logits.dims2()?;
    check_labels(labels, n, c)?;
    let mut g = vec![0f32; n * c];
    for i in 0..n {
        let p = softmax_row(cache.logits.row(i));
        for j in 0..c {
            let t = if j == labels[i] { 1.0 } else { 0.0 };
            g[i * c + j] = ((p[j] - t) / n as f64) as f32;
        }
    }
    Tensor::new(vec![n, c], g)
}

fn column_sums(t: &Tensor) -> Result<Vec<f32>> {
    let (n, d) = t.dims2()?;
    let mut s = vec![0f64; d];
    for i in 0..n {
        for (a, &v) in s.iter_mut().zip(t.row(i)) {
            *a += f64::from(v);
        }
    }
    Ok(s.into_iter().map(|v| v as f32).collect())
}

fn backward_impl(
    cache: &Cache,
    labels: &[usize],
    want_params: bool,
) -> Result<(Option<NamedParams>, Tensor)> {
    let mut grads: Vec<Option<Tensor>> = vec![None; cache.layout.len()];
    let mut g = loss_grad(cache, labels)?;
    for lc in cache.layers.iter().rev() {
        match lc {
            LayerCache::Dense {
                param_index,
                input,
                weight,
            } => {
                if want_params {
                    grads[*param_index] = Some(g.matmul_at(input)?);
                    grads[*param_index + 1] = Some(Tensor::vector(column_sums(&g)?));
                }
                g = g.matmul(weight)?;
            }
            LayerCache::Relu { input } => {
                g = g.zip_map(input, |dy, x| if x > 0.0 { dy } else { 0.0 })?;
            }
            LayerCache::BatchNorm {
                param_index,
                xhat,
                inv_std,
                gamma,
                mode,
            } => {
                let (n, d) = g.dims2()?;
                if want_params {
                    let mut dgamma = vec![0f64; d];
                    let mut dbeta = vec![0f64; d];
                    for i in 0..n {
                        for j in 0..d {
                            let dy = f64::from(g.data()[i * d + j]);
                            dgamma[j] += dy * f64::from(xhat.data()[i * d + j]);
                            dbeta[j] += dy;
                        }
                    }
                    grads[*param_index] = Some(Tensor::vector(
                        dgamma.into_iter().map(|v| v as f32).collect(),
                    ));
                    grads[*param_index + 1] = Some(Tensor::vector(
                        dbeta.into_iter().map(|v| v as f32).collect(),
                    ));
                }
                let mut dx = vec![0f32; n * d];
                match mode {
                    Mode::Eval => {
                        for i in 0..n {
                            for j in 0..d {
                                dx[i * d + j] = (f64::from(g.data()[i * d + j])
                                    * f64::from(gamma[j])
                                    * inv_std[j])
                                    as f32;
                            }
                        }
                    }
                    Mode::Train => {
                        let nf = n as f64;
                        for j in 0..d {
                            let mut s1 = 0f64;
                            let mut s2 = 0f64;
                            for i in 0..n {
                                let dxh = f64::from(g.data()[i * d + j]) * f64::from(gamma[j]);
                                s1 += dxh;
                                s2 += dxh * f64::from(xhat.data()[i * d + j]);
                            }
                            for i in 0..n {
                                let dxh = f64::from(g.data()[i * d + j]) * f64::from(gamma[j]);
                                let xh = f64::from(xhat.data()[i * d + j]);
                                dx[i * d + j] =
                                    (inv_std[j] / nf * (nf * dxh - s1 - xh * s2)) as f32;
                            }
                        }
                    }
                }
                g = Tensor::new(vec![n, d], dx)?;
            }
        }
    }
    if g.shape() != cache.input_shape.as_slice() {
        return Err(usage("cache does not match its own input shape"));
    }
    let params = if want_params {
        let tensors = grads
            .into_iter()
            .map(|t| t.ok_or_else(|| usage("cache missing a parameter gradient")))
            .collect::<Result<Vec<_>>>()?;
        Some(cache.layout.with_tensors(tensors)?)
    } else {
        None
    };
    Ok((params, g))
}

/// Gradients of `loss_xent ∘ forward` with respect to every parameter and the input.
pub fn backward(cache: &Cache, labels: &[usize]) -> Result<Gradients> {
    let (params, input) = backward_impl(cache, labels, true)?;
    Ok(Gradients {
        params: params.expect("requested"),
        input,
    })
}

/// Input gradient only; skips parameter gradients.
pub fn backward_input(cache: &Cache, labels: &[usize]) -> Result<Tensor> {
    Ok(backward_impl(cache, labels, false)?.1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn single_dense(fan_in: usize, out: usize) -> ModelSpec {
        ModelSpec {
            input_dim: fan_in,
            num_classes: out,
            layers: vec![LayerSpec::Dense { units: out }],
        }
    }

    #[test]
    fn init_single_dense_layout() {
        let spec = single_dense(2, 3);
        let (p, bn) = init_params(&spec, &mut RngState::new(0)).unwrap();
        assert_eq!(p.len(), 2);
        assert_eq!(p.get("dense0", "weight").unwrap().shape(), &[3, 2]);
        let b = p.get("dense0", "bias").unwrap();
        assert_eq!(b.shape(), &[3]);
        assert!(b.data().iter().all(|&v| v == 0.0));
        assert!(bn.layers.is_empty());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = ModelSpec::default_mlp(2, 3);
        let a = init_params(&spec, &mut RngState::new(4)).unwrap();
        let b = init_params(&spec, &mut RngState::new(4)).unwrap();
        assert!(a.0.bit_eq(&b.0));
        assert!(a.1.bit_eq(&b.1));
    }

    #[test]
    fn init_weight_variance_tracks_fan_in() {
        let spec = single_dense(100, 100);
        let (p, _) = init_params(&spec, &mut RngState::new(12)).unwrap();
        let w = p.get("dense0", "weight").unwrap();
        assert_eq!(w.len(), 10_000);
        let m = w.mean();
        let var = w
            .data()
            .iter()
            .map(|&v| (f64::from(v) - m).powi(2))
            .sum::<f64>()
            / (w.len() - 1) as f64;
        assert!((var - 0.01).abs() < 0.002, "var {var}");
    }

    #[test]
    fn invalid_specs_rejected() {
        let mut spec = single_dense(2, 3);
        spec.num_classes = 4;
        assert!(init_params(&spec, &mut RngState::new(0)).is_err());
        let spec = ModelSpec {
            input_dim: 2,
            num_classes: 2,
            layers: vec![LayerSpec::Dense { units: 0 }],
        };
        assert!(spec.resolve().is_err());
    }

    #[test]
    fn identity_dense_passes_input_through() {
        let spec = single_dense(3, 3);
        let (p, bn) = init_params(&spec, &mut RngState::new(0)).unwrap();
        let eye = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
        ]);
        let p = p.with_tensors(vec![eye, Tensor::zeros(&[3])]).unwrap();
        let x = Tensor::from_rows(&[vec![0.5, -1.0, 2.0], vec![3.0, 0.0, -0.25]]);
        let out = forward(&spec, &p, &bn, &x, Mode::Eval).unwrap();
        assert!(out.logits.bit_eq(&x));
    }

    #[test]
    fn train_batchnorm_standardizes_columns() {
        let spec = ModelSpec {
            input_dim: 4,
            num_classes: 4,
            layers: vec![LayerSpec::BatchNorm],
        };
        let (p, bn) = init_params(&spec, &mut RngState::new(0)).unwrap();
        let x = RngState::new(3).gaussian(&[32, 4]).map(|v| 10.0 * v + 3.0);
        let out = forward(&spec, &p, &bn, &x, Mode::Train).unwrap();
        let (mean, var) = column_moments(&out.logits).unwrap();
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-5, "mean {m}");
            assert!((v - 1.0).abs() < 1e-5, "var {v}");
        }
        let updated = out.bnstats.unwrap();
        assert_eq!(updated.num_batches, 1);
        assert_ne!(updated, bn);
    }

    #[test]
    fn eval_forward_is_pure() {
        let spec = ModelSpec::default_mlp(2, 3);
        let model = Model::init(spec, &mut RngState::new(1)).unwrap();
        let x = RngState::new(2).gaussian(&[8, 2]);
        let a = model.forward(&x, Mode::Eval).unwrap();
        let b = model.forward(&x, Mode::Eval).unwrap();
        assert!(a.logits.bit_eq(&b.logits));
        assert!(a.bnstats.is_none() && b.bnstats.is_none());
    }

    #[test]
    fn xent_known_values() {
        let logits = Tensor::full(&[4, 10], 0.7);
        let l = loss_xent(&logits, &[0, 3, 9, 5]).unwrap();
        assert!((l - 10f64.ln()).abs() < 1e-6);

        let confident = Tensor::from_rows(&[vec![50.0, 0.0, 0.0], vec![0.0, 0.0, 50.0]]);
        assert!(loss_xent(&confident, &[0, 2]).unwrap() < 1e-3);

        assert!(matches!(
            loss_xent(&confident, &[0, 3]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn xent_matches_direct_softmax() {
        let mut rng = RngState::new(21);
        let logits = rng.gaussian(&[16, 5]).scale(3.0);
        let labels: Vec<usize> = (0..16).map(|i| i % 5).collect();
        let direct: f64 = (0..16)
            .map(|i| {
                let row = logits.row(i);
                let z: f64 = row.iter().map(|&v| f64::from(v).exp()).sum();
                -(f64::from(row[labels[i]]).exp() / z).ln()
            })
            .sum::<f64>()
            / 16.0;
        assert!((loss_xent(&logits, &labels).unwrap() - direct).abs() < 1e-6);
    }

    #[test]
    fn zero_net_has_zero_weight_gradients() {
        let spec = ModelSpec::mlp(3, &[4], 2, false);
        let (p, bn) = init_params(&spec, &mut RngState::new(0)).unwrap();
        let p = p.map(|_| 0.0);
        let x = Tensor::zeros(&[5, 3]);
        let f = forward(&spec, &p, &bn, &x, Mode::Train).unwrap();
        let g = backward(&f.cache, &[0, 1, 0, 1, 1]).unwrap();
        for e in g.params.iter().filter(|e| e.name == "weight") {
            assert!(e.tensor.data().iter().all(|&v| v == 0.0), "{}", e.key());
        }
    }

    #[test]
    fn backward_rejects_mismatched_labels() {
        let spec = ModelSpec::default_mlp(2, 3);
        let model = Model::init(spec, &mut RngState::new(1)).unwrap();
        let x = RngState::new(2).gaussian(&[4, 2]);
        let f = model.forward(&x, Mode::Eval).unwrap();
        assert!(matches!(backward(&f.cache, &[0, 1]), Err(Error::Usage(_))));
    }

    #[test]
    fn forward_rejects_wrong_input_width() {
        let model = Model::init(ModelSpec::default_mlp(2, 3), &mut RngState::new(1)).unwrap();
        let x = Tensor::zeros(&[4, 5]);
        assert!(matches!(model.logits(&x), Err(Error::Dimension { .. })));
    }

    #[test]
    fn forward_rejects_foreign_params() {
        let a = Model::init(ModelSpec::default_mlp(2, 3), &mut RngState::new(1)).unwrap();
        let b = Model::init(ModelSpec::mlp(2, &[8], 3, false), &mut RngState::new(1)).unwrap();
        let x = Tensor::zeros(&[4, 2]);
        assert!(forward(&a.spec, &b.params, &a.bn, &x, Mode::Eval).is_err());
    }
}
