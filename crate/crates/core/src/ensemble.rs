//! Weight-space self-ensembles over the checkpoint history.
//!
//! The median ensemble takes, for every coordinate of every trainable tensor,
//! the median of that coordinate across all checkpoints in a window that
//! starts at a fixed epoch and grows with training. Running-mean and
//! exponential-moving-average ensembles are provided as baselines. Every
//! ensembled parameter set gets fresh BatchNorm statistics from a full pass
//! over the training data.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::diffnet::{
    bn_apply, dense_forward, relu_forward, BnLayerStats, BnStats, Layer, Model, ModelSpec,
    NamedParams,
};
use crate::error::{argument, usage, Error, Result};
use crate::exec::Exec;
use crate::harness::checkpoint::{load_checkpoint, save_checkpoint};
use crate::numcore::Tensor;

/// Parameters and BatchNorm statistics at the end of one epoch.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub epoch: usize,
    pub params: NamedParams,
    pub bnstats: BnStats,
}

impl Checkpoint {
    pub fn bit_eq(&self, other: &Checkpoint) -> bool {
        self.epoch == other.epoch
            && self.params.bit_eq(&other.params)
            && self.bnstats.bit_eq(&other.bnstats)
    }

    pub fn to_model(&self, spec: &ModelSpec) -> Model {
        Model {
            spec: spec.clone(),
            params: self.params.clone(),
            bn: self.bnstats.clone(),
        }
    }
}

enum Backing {
    Memory(Vec<Checkpoint>),
    Disk(PathBuf),
}

/// Epoch-ordered checkpoint history, in memory or one file per checkpoint.
///
/// Reads take `&self`; only `push` needs exclusive access.
pub struct CheckpointStore {
    backing: Backing,
    epochs: Vec<usize>,
}

impl CheckpointStore {
    pub fn in_memory() -> Self {
        CheckpointStore {
            backing: Backing::Memory(Vec::new()),
            epochs: Vec::new(),
        }
    }

    pub fn file_name(epoch: usize) -> String {
        format!("epoch_{epoch:06}.ckpt")
    }

    /// Disk store rooted at `dir`, picking up any checkpoints already there.
    pub fn open(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref().to_path_buf();
        std::fs::create_dir_all(&dir)?;
        let mut epochs = Vec::new();
        for entry in std::fs::read_dir(&dir)? {
            let name = entry?.file_name();
            let name = name.to_string_lossy();
            if let Some(e) = name
                .strip_prefix("epoch_")
                .and_then(|s| s.strip_suffix(".ckpt"))
                .and_then(|s| s.parse::<usize>().ok())
            {
                epochs.push(e);
            }
        }
        epochs.sort_unstable();
        Ok(CheckpointStore {
            backing: Backing::Disk(dir),
            epochs,
        })
    }

    pub fn epochs(&self) -> &[usize] {
        &self.epochs
    }

    pub fn len(&self) -> usize {
        self.epochs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    pub fn push(&mut self, ckpt: Checkpoint) -> Result<()> {
        if let Some(&last) = self.epochs.last() {
            if ckpt.epoch <= last {
                return Err(usage(format!(
                    "checkpoint epoch {} not after last stored epoch {last}",
                    ckpt.epoch
                )));
            }
        }
        self.epochs.push(ckpt.epoch);
        match &mut self.backing {
            Backing::Memory(v) => v.push(ckpt),
            Backing::Disk(dir) => save_checkpoint(&ckpt, dir.join(Self::file_name(ckpt.epoch)))?,
        }
        Ok(())
    }

    pub fn get(&self, epoch: usize) -> Result<Checkpoint> {
        let pos = self
            .epochs
            .binary_search(&epoch)
            .map_err(|_| Error::Precondition(format!("no checkpoint stored for epoch {epoch}")))?;
        match &self.backing {
            Backing::Memory(v) => Ok(v[pos].clone()),
            Backing::Disk(dir) => load_checkpoint(dir.join(Self::file_name(epoch))),
        }
    }

    /// Stored epochs in `[start, end]`.
    pub fn window_epochs(&self, start: usize, end: usize) -> Vec<usize> {
        self.epochs
            .iter()
            .copied()
            .filter(|&e| e >= start && e <= end)
            .collect()
    }

    /// Checkpoints in `[start, end]`, oldest first; errors when empty.
    pub fn window(&self, start: usize, end: usize) -> Result<Vec<Checkpoint>> {
        let epochs = self.window_epochs(start, end);
        if epochs.is_empty() {
            return Err(Error::Precondition(format!(
                "no checkpoint in ensemble window [{start}, {end}]"
            )));
        }
        epochs.into_iter().map(|e| self.get(e)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    None,
    WaMean,
    Ema,
    MeatMedian,
}

impl Strategy {
    pub const ALL: [Strategy; 4] = [
        Strategy::None,
        Strategy::WaMean,
        Strategy::Ema,
        Strategy::MeatMedian,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Strategy::None => "none",
            Strategy::WaMean => "wa_mean",
            Strategy::Ema => "ema",
            Strategy::MeatMedian => "meat_median",
        }
    }
}

impl fmt::Display for Strategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Strategy {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Strategy::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| argument(format!("unknown ensemble strategy `{s}`")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleConfig {
    pub strategy: Strategy,
    /// Window start as a fraction of the total epoch count.
    pub start_fraction: f64,
    /// EMA decay τ applied per checkpoint.
    pub ema_decay: f64,
}

impl Default for EnsembleConfig {
    fn default() -> Self {
        EnsembleConfig {
            strategy: Strategy::MeatMedian,
            start_fraction: 0.5,
            ema_decay: 0.9,
        }
    }
}

impl EnsembleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.start_fraction > 0.0 && self.start_fraction < 1.0) {
            return Err(argument(format!(
                "start_fraction must lie in (0, 1), got {}",
                self.start_fraction
            )));
        }
        if !(0.0..=1.0).contains(&self.ema_decay) {
            return Err(argument(format!(
                "ema_decay must lie in [0, 1], got {}",
                self.ema_decay
            )));
        }
        Ok(())
    }

    /// First epoch of the ensemble window.
    pub fn start_epoch(&self, total_epochs: usize) -> usize {
        (self.start_fraction * total_epochs as f64).round() as usize
    }
}

/// Running mean: `running + (new − running)/(count + 1)`, where `count`
/// snapshots are already folded into `running`.
pub fn wa_update(running: &NamedParams, count: usize, new: &NamedParams) -> Result<NamedParams> {
    if count == 0 {
        return Err(argument("wa_update count must be >= 1"));
    }
    let k = (count + 1) as f64;
    running.zip_with(new, |r, n| {
        let r = f64::from(r);
        (r + (f64::from(n) - r) / k) as f32
    })
}

/// `τ·running + (1 − τ)·new`.
pub fn ema_update(running: &NamedParams, new: &NamedParams, tau: f64) -> Result<NamedParams> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(argument(format!("ema decay {tau} outside [0, 1]")));
    }
    running.zip_with(new, |r, n| {
        (tau * f64::from(r) + (1.0 - tau) * f64::from(n)) as f32
    })
}

/// Median of a value set: the middle order statistic for odd counts, the
/// mean of the two middle ones for even counts. Reorders `values`.
pub fn median_in_place(values: &mut [f32]) -> f32 {
    let n = values.len();
    assert!(n > 0, "median of an empty set");
    let mid = n / 2;
    let (left, upper, _) = values.select_nth_unstable_by(mid, f32::total_cmp);
    let upper = *upper;
    if n % 2 == 1 {
        upper
    } else {
        let lower = left
            .iter()
            .copied()
            .max_by(f32::total_cmp)
            .expect("even n >= 2");
        ((f64::from(lower) + f64::from(upper)) / 2.0) as f32
    }
}

const MEDIAN_CHUNK: usize = 1024;

/// Coordinate-wise median across aligned parameter sets.
pub fn median_params(snapshots: &[&NamedParams], exec: Exec) -> Result<NamedParams> {
    let first = *snapshots
        .first()
        .ok_or_else(|| Error::Precondition("median over zero snapshots".into()))?;
    for s in &snapshots[1..] {
        first.check_aligned(s)?;
    }
    let n = snapshots.len();
    let mut out = Vec::with_capacity(first.len());
    for (t, entry) in first.iter().enumerate() {
        let columns: Vec<&[f32]> = snapshots
            .iter()
            .map(|s| s.entries()[t].tensor.data())
            .collect();
        let mut data = vec![0f32; entry.tensor.len()];
        exec.for_each_chunk(&mut data, MEDIAN_CHUNK, |ci, chunk| {
            let mut buf = vec![0f32; n];
            for (j, o) in chunk.iter_mut().enumerate() {
                let idx = ci * MEDIAN_CHUNK + j;
                for (b, col) in buf.iter_mut().zip(&columns) {
                    *b = col[idx];
                }
                *o = median_in_place(&mut buf);
            }
        });
        out.push(Tensor::new(entry.tensor.shape().to_vec(), data)?);
    }
    first.with_tensors(out)
}

/// Coordinate-wise median over every stored checkpoint with epoch in
/// `[start_epoch, upto_epoch]`.
pub fn meat_median(
    store: &CheckpointStore,
    start_epoch: usize,
    upto_epoch: usize,
) -> Result<NamedParams> {
    let window = store.window(start_epoch, upto_epoch)?;
    let refs: Vec<&NamedParams> = window.iter().map(|c| &c.params).collect();
    median_params(&refs, Exec::default())
}

/// Fresh BatchNorm statistics from one pass over `batches` under `params`.
///
/// Layers are processed in order. Each BatchNorm layer's mean and unbiased
/// variance are aggregated exactly over all rows of all batches, and those
/// statistics normalize the activations fed to later layers, so the result
/// is self-consistent with eval-mode forward.
pub fn recalibrate_bn(
    spec: &ModelSpec,
    params: &NamedParams,
    batches: &[Tensor],
) -> Result<BnStats> {
    let total_rows: usize = batches.iter().map(|b| b.shape()[0]).sum();
    if batches.is_empty() || total_rows == 0 {
        return Err(argument("BatchNorm recalibration needs a nonempty pass"));
    }
    let layers = spec.resolve()?;
    let last_bn = layers
        .iter()
        .rposition(|l| matches!(l, Layer::BatchNorm { .. }));
    let Some(last_bn) = last_bn else {
        return Ok(BnStats::default());
    };
    for b in batches {
        if b.dims2()?.1 != spec.input_dim {
            return Err(Error::Dimension {
                context: "recalibration batch",
                left: b.shape().to_vec(),
                right: vec![spec.input_dim],
            });
        }
    }

    let exec = Exec::auto(total_rows * 64 * 64);
    let mut acts: Vec<Tensor> = batches.to_vec();
    let mut stats = Vec::new();
    let mut p = 0usize;
    let entries = params.entries();
    for layer in &layers[..=last_bn] {
        match layer {
            Layer::Dense { name, .. } => {
                let (w, b) = param_pair(entries, p, name)?;
                acts = exec
                    .map(acts.len(), |i| dense_forward(&acts[i], w, b))
                    .into_iter()
                    .collect::<Result<_>>()?;
                p += 2;
            }
            Layer::Relu { .. } => {
                acts = acts.iter().map(relu_forward).collect();
            }
            Layer::BatchNorm { name, dim } => {
                let (gamma, beta) = param_pair(entries, p, name)?;
                let d = *dim;
                let mut sum = vec![0f64; d];
                for a in &acts {
                    for i in 0..a.shape()[0] {
                        for (s, &v) in sum.iter_mut().zip(a.row(i)) {
                            *s += f64::from(v);
                        }
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / total_rows as f64).collect();
                let mut sq = vec![0f64; d];
                for a in &acts {
                    for i in 0..a.shape()[0] {
                        for ((s, &v), m) in sq.iter_mut().zip(a.row(i)).zip(&mean) {
                            let c = f64::from(v) - m;
                            *s += c * c;
                        }
                    }
                }
                let denom = if total_rows > 1 {
                    (total_rows - 1) as f64
                } else {
                    1.0
                };
                let mean_t = Tensor::vector(mean.iter().map(|&m| m as f32).collect());
                let var_t = Tensor::vector(sq.iter().map(|&s| (s / denom) as f32).collect());
                let mean64: Vec<f64> = mean_t.data().iter().map(|&v| f64::from(v)).collect();
                let var64: Vec<f64> = var_t.data().iter().map(|&v| f64::from(v)).collect();
                acts = acts
                    .iter()
                    .map(|a| Ok(bn_apply(a, &mean64, &var64, gamma.data(), beta.data())?.0))
                    .collect::<Result<_>>()?;
                stats.push(BnLayerStats {
                    layer: name.clone(),
                    mean: mean_t,
                    var: var_t,
                });
                p += 2;
            }
        }
    }
    Ok(BnStats {
        layers: stats,
        num_batches: batches.len() as u64,
    })
}

fn param_pair<'a>(
    entries: &'a [crate::diffnet::ParamTensor],
    p: usize,
    layer: &str,
) -> Result<(&'a Tensor, &'a Tensor)> {
    match (entries.get(p), entries.get(p + 1)) {
        (Some(a), Some(b)) if a.layer == layer && b.layer == layer => Ok((&a.tensor, &b.tensor)),
        _ => Err(usage("parameters do not match the model architecture")),
    }
}

/// Build the strategy's parameter set at `upto_epoch` and pair it with
/// recalibrated BatchNorm statistics. `Strategy::None` returns the stored
/// checkpoint unchanged.
pub fn finalize(
    spec: &ModelSpec,
    store: &CheckpointStore,
    cfg: &EnsembleConfig,
    total_epochs: usize,
    upto_epoch: usize,
    calibration: &[Tensor],
) -> Result<Checkpoint> {
    cfg.validate()?;
    let start = cfg.start_epoch(total_epochs);
    let params = match cfg.strategy {
        Strategy::None => return store.get(upto_epoch),
        Strategy::MeatMedian => meat_median(store, start, upto_epoch)?,
        Strategy::WaMean => {
            let window = store.window(start, upto_epoch)?;
            let mut it = window.into_iter();
            let mut running = it.next().expect("nonempty window").params;
            for (count, ckpt) in it.enumerate() {
                running = wa_update(&running, count + 1, &ckpt.params)?;
            }
            running
        }
        Strategy::Ema => {
            let window = store.window(start, upto_epoch)?;
            let mut it = window.into_iter();
            let mut running = it.next().expect("nonempty window").params;
            for ckpt in it {
                running = ema_update(&running, &ckpt.params, cfg.ema_decay)?;
            }
            running
        }
    };
    let bnstats = recalibrate_bn(spec, &params, calibration)?;
    Ok(Checkpoint {
        epoch: upto_epoch,
        params,
        bnstats,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::{init_params, ParamTensor};
    use crate::numcore::RngState;

    fn params_from(values: &[&[f32]]) -> NamedParams {
        NamedParams::new(
            values
                .iter()
                .enumerate()
                .map(|(i, v)| ParamTensor {
                    layer: format!("l{i}"),
                    name: "w".into(),
                    tensor: Tensor::vector(v.to_vec()),
                })
                .collect(),
        )
        .unwrap()
    }

    fn store_of(snaps: &[NamedParams]) -> CheckpointStore {
        let mut s = CheckpointStore::in_memory();
        for (e, p) in snaps.iter().enumerate() {
            s.push(Checkpoint {
                epoch: e,
                params: p.clone(),
                bnstats: BnStats::default(),
            })
            .unwrap();
        }
        s
    }

    #[test]
    fn wa_two_point_mean_and_identity() {
        let r = params_from(&[&[1.0]]);
        let n = params_from(&[&[3.0]]);
        assert_eq!(wa_update(&r, 1, &n).unwrap().flatten(), vec![2.0]);
        assert_eq!(wa_update(&r, 5, &r).unwrap(), r);
        assert!(wa_update(&r, 0, &n).is_err());
    }

    #[test]
    fn ema_boundaries_and_arithmetic() {
        let r = params_from(&[&[2.0, -1.5]]);
        let n = params_from(&[&[4.0, 7.25]]);
        assert!(ema_update(&r, &n, 0.0).unwrap().bit_eq(&n));
        assert!(ema_update(&r, &n, 1.0).unwrap().bit_eq(&r));
        assert_eq!(ema_update(&r, &n, 0.9).unwrap().flatten()[0], 2.2);
        assert!(ema_update(&r, &n, 1.5).is_err());
    }

    #[test]
    fn misaligned_updates_rejected() {
        let a = params_from(&[&[1.0]]);
        let b = params_from(&[&[1.0, 2.0]]);
        assert!(matches!(wa_update(&a, 1, &b), Err(Error::Usage(_))));
        assert!(matches!(ema_update(&a, &b, 0.5), Err(Error::Usage(_))));
    }

    #[test]
    fn median_small_cases() {
        let one = params_from(&[&[0.3, -2.0]]);
        let s = store_of(std::slice::from_ref(&one));
        assert!(meat_median(&s, 0, 0).unwrap().bit_eq(&one));

        let s = store_of(&[
            params_from(&[&[1.0, 5.0]]),
            params_from(&[&[2.0, 3.0]]),
            params_from(&[&[9.0, 1.0]]),
        ]);
        assert_eq!(meat_median(&s, 0, 2).unwrap().flatten(), vec![2.0, 3.0]);
        // window [1, 2] is even: mean of the middle pair
        assert_eq!(meat_median(&s, 1, 2).unwrap().flatten(), vec![5.5, 2.0]);
    }

    #[test]
    fn empty_window_names_bounds() {
        let s = store_of(&[params_from(&[&[1.0]])]);
        let err = meat_median(&s, 5, 9).unwrap_err().to_string();
        assert!(err.contains("[5, 9]"), "{err}");
    }

    #[test]
    fn store_rejects_non_increasing_epochs() {
        let mut s = store_of(&[params_from(&[&[1.0]]), params_from(&[&[2.0]])]);
        let dup = Checkpoint {
            epoch: 1,
            params: params_from(&[&[3.0]]),
            bnstats: BnStats::default(),
        };
        assert!(s.push(dup).is_err());
    }

    #[test]
    fn disk_store_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let spec = ModelSpec::default_mlp(2, 3);
        let mut rng = RngState::new(1);
        let mut store = CheckpointStore::open(dir.path()).unwrap();
        let mut written = Vec::new();
        for e in [3, 4, 7] {
            let (params, bnstats) = init_params(&spec, &mut rng).unwrap();
            let c = Checkpoint {
                epoch: e,
                params,
                bnstats,
            };
            store.push(c.clone()).unwrap();
            written.push(c);
        }
        let reopened = CheckpointStore::open(dir.path()).unwrap();
        assert_eq!(reopened.epochs(), &[3, 4, 7]);
        for c in &written {
            assert!(reopened.get(c.epoch).unwrap().bit_eq(c));
        }
        assert_eq!(reopened.window_epochs(4, 10), vec![4, 7]);
    }

    #[test]
    fn recalibrate_constant_input() {
        let spec = ModelSpec {
            input_dim: 3,
            num_classes: 3,
            layers: vec![crate::diffnet::LayerSpec::BatchNorm],
        };
        let (p, _) = init_params(&spec, &mut RngState::new(0)).unwrap();
        let batch = Tensor::from_rows(&vec![vec![0.5, -1.0, 2.0]; 6]);
        let bn = recalibrate_bn(&spec, &p, &[batch.clone(), batch]).unwrap();
        assert_eq!(bn.layers[0].mean.data(), &[0.5, -1.0, 2.0]);
        assert_eq!(bn.layers[0].var.data(), &[0.0, 0.0, 0.0]);
        assert_eq!(bn.num_batches, 2);
    }

    #[test]
    fn recalibrate_rejects_empty_pass() {
        let spec = ModelSpec::default_mlp(2, 3);
        let (p, _) = init_params(&spec, &mut RngState::new(0)).unwrap();
        assert!(matches!(
            recalibrate_bn(&spec, &p, &[]),
            Err(Error::Argument(_))
        ));
    }

    #[test]
    fn finalize_none_returns_live_checkpoint() {
        let spec = ModelSpec::default_mlp(2, 3);
        let mut rng = RngState::new(5);
        let mut store = CheckpointStore::in_memory();
        let mut last = None;
        for e in 0..4 {
            let (params, bnstats) = init_params(&spec, &mut rng).unwrap();
            let c = Checkpoint {
                epoch: e,
                params,
                bnstats,
            };
            store.push(c.clone()).unwrap();
            last = Some(c);
        }
        let cfg = EnsembleConfig {
            strategy: Strategy::None,
            ..EnsembleConfig::default()
        };
        let data = [rng.gaussian(&[10, 2])];
        let out = finalize(&spec, &store, &cfg, 4, 3, &data).unwrap();
        assert!(out.bit_eq(last.as_ref().unwrap()));
    }

    #[test]
    fn strategy_names_round_trip() {
        for s in Strategy::ALL {
            assert_eq!(s.as_str().parse::<Strategy>().unwrap(), s);
        }
        assert!("median".parse::<Strategy>().is_err());
    }

    #[test]
    fn config_start_epoch() {
        let cfg = EnsembleConfig::default();
        assert_eq!(cfg.start_epoch(120), 60);
        assert_eq!(cfg.start_epoch(60), 30);
        assert!(EnsembleConfig {
            start_fraction: 1.0,
            ..cfg
        }
        .validate()
        .is_err());
        assert!(EnsembleConfig {
            ema_decay: -0.1,
            ..cfg
        }
        .validate()
        .is_err());
    }
}
