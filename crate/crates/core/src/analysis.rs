//! Evaluation and diagnostics for trained parameter sets.

use serde::{Deserialize, Serialize};

use crate::attack::{pgd, AttackConfig};
use crate::diffnet::{loss_xent, Model, NamedParams};
use crate::error::{argument, Error, Result};
use crate::exec::Exec;
use crate::harness::Dataset;
use crate::numcore::{RngState, Tensor};
use crate::trainer::MetricsRecord;

/// Examples per evaluation batch; each batch gets its own RNG substream.
pub const EVAL_BATCH: usize = 256;

/// Fraction of examples whose (optionally attacked) argmax equals the label.
///
/// With an attack, batch `b` draws its random start from `rng.substream(b)`,
/// so the result does not depend on evaluation order or thread count.
pub fn accuracy(
    model: &Model,
    data: &Dataset,
    attack: Option<(&AttackConfig, &RngState)>,
) -> Result<f64> {
    accuracy_on(model, &data.features, &data.labels, attack)
}

pub fn accuracy_on(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    attack: Option<(&AttackConfig, &RngState)>,
) -> Result<f64> {
    if labels.is_empty() {
        return Err(argument("accuracy of an empty dataset"));
    }
    let n = labels.len();
    let batches = n.div_ceil(EVAL_BATCH);
    let work = n * model.params.num_coordinates() * attack.map_or(1, |(c, _)| c.steps + 1);
    let correct = Exec::auto(work).map(batches, |b| -> Result<usize> {
        let idx: Vec<usize> = (b * EVAL_BATCH..((b + 1) * EVAL_BATCH).min(n)).collect();
        let xb = x.gather_rows(&idx)?;
        let yb: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
        let input = match attack {
            Some((cfg, rng)) if cfg.epsilon > 0.0 => {
                pgd(model, &xb, &yb, cfg, &mut rng.substream(b as u64))?
            }
            _ => xb,
        };
        let pred = model.logits(&input)?.argmax_rows()?;
        Ok(pred.iter().zip(&yb).filter(|(p, t)| p == t).count())
    });
    let correct: usize = correct.into_iter().sum::<Result<usize>>()?;
    Ok(correct as f64 / n as f64)
}

/// Best-versus-last accuracies over a training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GapReport {
    /// Epoch of the highest robust accuracy (earliest on ties).
    pub best_epoch: usize,
    pub best_robust: f64,
    pub last_robust: f64,
    pub robust_gap: f64,
    pub best_clean_epoch: usize,
    pub best_clean: f64,
    pub last_clean: f64,
    pub clean_gap: f64,
}

fn best_of(history: &[MetricsRecord], key: impl Fn(&MetricsRecord) -> f64) -> (usize, f64) {
    history
        .iter()
        .fold((history[0].epoch, key(&history[0])), |(be, bv), r| {
            let v = key(r);
            if v > bv {
                (r.epoch, v)
            } else {
                (be, bv)
            }
        })
}

pub fn gap_report(history: &[MetricsRecord]) -> Result<GapReport> {
    let last = history
        .last()
        .ok_or_else(|| argument("gap report of an empty history"))?;
    let (best_epoch, best_robust) = best_of(history, |r| r.test_robust_acc);
    let (best_clean_epoch, best_clean) = best_of(history, |r| r.test_clean_acc);
    Ok(GapReport {
        best_epoch,
        best_robust,
        last_robust: last.test_robust_acc,
        robust_gap: best_robust - last.test_robust_acc,
        best_clean_epoch,
        best_clean,
        last_clean: last.test_clean_acc,
        clean_gap: best_clean - last.test_clean_acc,
    })
}

/// Coordinates of the tensors matched by `selector`: `*` for everything,
/// a layer name such as `dense6`, or a full key such as `dense6.weight`.
pub fn select_coordinates(params: &NamedParams, selector: &str) -> Result<Vec<f32>> {
    let mut out = Vec::new();
    let mut matched = false;
    for e in params.iter() {
        if selector == "*" || selector == e.layer || selector == e.key() {
            matched = true;
            out.extend_from_slice(e.tensor.data());
        }
    }
    if !matched {
        return Err(Error::Selector(selector.to_string()));
    }
    Ok(out)
}

/// Sample standard deviation (n − 1 denominator).
pub fn sample_std(values: &[f32]) -> f64 {
    let n = values.len();
    if n < 2 {
        return 0.0;
    }
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / n as f64;
    (values
        .iter()
        .map(|&v| (f64::from(v) - mean).powi(2))
        .sum::<f64>()
        / (n - 1) as f64)
        .sqrt()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub selector: String,
    pub lo: f32,
    pub hi: f32,
    pub counts: Vec<u64>,
    pub total: u64,
    pub mean: f64,
    pub std: f64,
}

impl Histogram {
    pub fn bin_edges(&self) -> Vec<f64> {
        let bins = self.counts.len();
        (0..=bins)
            .map(|i| {
                f64::from(self.lo)
                    + (f64::from(self.hi) - f64::from(self.lo)) * i as f64 / bins as f64
            })
            .collect()
    }
}

/// Equal-width histogram of the selected coordinates over `[lo, hi]`;
/// values outside land in the edge bins.
pub fn weight_histogram(
    params: &NamedParams,
    selector: &str,
    bins: usize,
    range: (f32, f32),
) -> Result<Histogram> {
    let (lo, hi) = range;
    if bins == 0 {
        return Err(argument("histogram needs at least one bin"));
    }
    if !(lo < hi) {
        return Err(argument(format!("histogram range [{lo}, {hi}] is empty")));
    }
    let values = select_coordinates(params, selector)?;
    let mut counts = vec![0u64; bins];
    let width = f64::from(hi) - f64::from(lo);
    for &v in &values {
        let pos = ((f64::from(v) - f64::from(lo)) / width * bins as f64).floor();
        let idx = pos.clamp(0.0, (bins - 1) as f64) as usize;
        counts[idx] += 1;
    }
    let mean = values.iter().map(|&v| f64::from(v)).sum::<f64>() / values.len().max(1) as f64;
    Ok(Histogram {
        selector: selector.to_string(),
        lo,
        hi,
        counts,
        total: values.len() as u64,
        mean,
        std: sample_std(&values),
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Normalization {
    /// One scale for the whole vector: `v/‖v‖·‖θ‖` over all parameters.
    GlobalFrobenius,
    /// The same rescaling applied tensor by tensor.
    PerLayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeConfig {
    /// Grid points per axis; odd so that the origin is on the grid.
    pub resolution: usize,
    /// Coefficients span `[-range, range]` on both axes.
    pub range: f64,
    pub direction_seed: u64,
    pub normalization: Normalization,
    /// Examples in the fixed evaluation subsample.
    pub sample_size: usize,
}

impl Default for LandscapeConfig {
    fn default() -> Self {
        LandscapeConfig {
            resolution: 25,
            range: 1.0,
            direction_seed: 0,
            normalization: Normalization::GlobalFrobenius,
            sample_size: 512,
        }
    }
}

impl LandscapeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.resolution.is_multiple_of(2) {
            return Err(argument(format!(
                "landscape resolution must be odd, got {}",
                self.resolution
            )));
        }
        if !(self.range > 0.0 && self.range.is_finite()) {
            return Err(argument("landscape range must be positive"));
        }
        if self.sample_size == 0 {
            return Err(argument("landscape sample_size must be positive"));
        }
        Ok(())
    }

    /// Axis coefficients, symmetric with an exact zero in the middle.
    pub fn coefficients(&self) -> Vec<f64> {
        if self.resolution == 1 {
            return vec![0.0];
        }
        let last = (self.resolution - 1) as f64;
        (0..self.resolution)
            .map(|i| self.range * (2.0 * i as f64 / last - 1.0))
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LandscapeGrid {
    pub coefficients: Vec<f64>,
    /// `values[i][j] = z(coefficients[i], coefficients[j])`.
    pub values: Vec<Vec<f64>>,
}

impl LandscapeGrid {
    pub fn center(&self) -> f64 {
        let c = self.coefficients.len() / 2;
        self.values[c][c]
    }

    pub fn variance(&self) -> f64 {
        let all: Vec<f64> = self.values.iter().flatten().copied().collect();
        let mean = all.iter().sum::<f64>() / all.len() as f64;
        all.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / all.len() as f64
    }

    /// `max − min` over the grid.
    pub fn spread(&self) -> f64 {
        let it = self.values.iter().flatten().copied();
        let max = it.clone().fold(f64::NEG_INFINITY, f64::max);
        let min = it.fold(f64::INFINITY, f64::min);
        max - min
    }
}

/// Two Gaussian directions drawn from `cfg.direction_seed`, each rescaled to
/// the norm of `params` under the configured normalization.
pub fn landscape_directions(
    params: &NamedParams,
    cfg: &LandscapeConfig,
) -> Result<(NamedParams, NamedParams)> {
    let mut rng = RngState::new(cfg.direction_seed);
    let mut draw = || -> Result<NamedParams> {
        let raw: Vec<Tensor> = params.tensors().map(|t| rng.gaussian(t.shape())).collect();
        let scaled = match cfg.normalization {
            Normalization::GlobalFrobenius => {
                let vn = crate::numcore::frobenius_norm_concat(&raw);
                let s = if vn > 0.0 {
                    params.frobenius_norm() / vn
                } else {
                    0.0
                };
                raw.iter()
                    .map(|t| t.map(|v| (f64::from(v) * s) as f32))
                    .collect()
            }
            Normalization::PerLayer => raw
                .iter()
                .zip(params.tensors())
                .map(|(v, p)| {
                    let vn = v.frobenius_norm();
                    let s = if vn > 0.0 {
                        p.frobenius_norm() / vn
                    } else {
                        0.0
                    };
                    v.map(|x| (f64::from(x) * s) as f32)
                })
                .collect(),
        };
        params.with_tensors(scaled)
    };
    let d1 = draw()?;
    let d2 = draw()?;
    Ok((d1, d2))
}

/// `θ + α·d₁ + β·d₂`, combined in f64.
pub fn perturb(
    params: &NamedParams,
    d1: &NamedParams,
    d2: &NamedParams,
    alpha: f64,
    beta: f64,
) -> Result<NamedParams> {
    params.check_aligned(d1)?;
    params.check_aligned(d2)?;
    let tensors = params
        .tensors()
        .zip(d1.tensors())
        .zip(d2.tensors())
        .map(|((p, a), b)| {
            let data = p
                .data()
                .iter()
                .zip(a.data())
                .zip(b.data())
                .map(|((&t, &u), &v)| {
                    (f64::from(t) + alpha * f64::from(u) + beta * f64::from(v)) as f32
                })
                .collect();
            Tensor::new(p.shape().to_vec(), data)
        })
        .collect::<Result<Vec<_>>>()?;
    params.with_tensors(tensors)
}

/// Loss surface over the `(α, β)` grid for an arbitrary loss of the parameters.
pub fn landscape_grid_with<F>(
    params: &NamedParams,
    cfg: &LandscapeConfig,
    exec: Exec,
    loss: F,
) -> Result<LandscapeGrid>
where
    F: Fn(&NamedParams) -> Result<f64> + Sync + Send,
{
    cfg.validate()?;
    let (d1, d2) = landscape_directions(params, cfg)?;
    let coefficients = cfg.coefficients();
    let r = coefficients.len();
    let flat = exec.map(r * r, |k| {
        let (i, j) = (k / r, k % r);
        loss(&perturb(
            params,
            &d1,
            &d2,
            coefficients[i],
            coefficients[j],
        )?)
    });
    let flat = flat.into_iter().collect::<Result<Vec<f64>>>()?;
    Ok(LandscapeGrid {
        values: flat.chunks(r).map(<[f64]>::to_vec).collect(),
        coefficients,
    })
}

/// Eval-mode cross-entropy surface of `model` on a fixed sample.
pub fn landscape_grid(
    model: &Model,
    x: &Tensor,
    labels: &[usize],
    cfg: &LandscapeConfig,
) -> Result<LandscapeGrid> {
    if labels.is_empty() {
        return Err(argument("landscape needs a nonempty data sample"));
    }
    landscape_grid_with(&model.params, cfg, Exec::default(), |p| {
        let m = Model {
            spec: model.spec.clone(),
            params: p.clone(),
            bn: model.bn.clone(),
        };
        loss_xent(&m.logits(x)?, labels)
    })
}
