//! End-to-end runs: adversarial training with every configured ensemble
//! strategy evaluated alongside, then the post-hoc analyses.
//!
//! Output directory layout:
//!
//! ```text
//! config.resolved.toml
//! metrics.jsonl              one line per (tag, epoch)
//! checkpoints/epoch_*.ckpt   raw trajectory
//! ensembles/<strategy>/epoch_*.ckpt
//! best.ckpt  last.ckpt
//! gap_reports.json  histograms.json  landscape/<tag>.json
//! ```

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use super::checkpoint::{save_checkpoint, write_atomic};
use super::config::ExperimentConfig;
use super::data::Dataset;
use super::metrics_log::{MetricsLog, RAW_TAG};
use super::sink::TrainSink;
use crate::analysis::{
    accuracy, gap_report, landscape_grid, select_coordinates, weight_histogram, GapReport,
    Histogram, LandscapeGrid,
};
use crate::diffnet::Model;
use crate::ensemble::{finalize, Checkpoint, CheckpointStore, Strategy};
use crate::error::{Error, Result};
use crate::numcore::Tensor;
use crate::trainer::{adversarial_train, eval_stream, MetricsRecord};

/// Artifacts written into an output directory; only these are removed when
/// `overwrite` is set.
const ARTIFACTS: [&str; 9] = [
    "config.resolved.toml",
    "metrics.jsonl",
    "checkpoints",
    "ensembles",
    "best.ckpt",
    "last.ckpt",
    "gap_reports.json",
    "histograms.json",
    "landscape",
];

/// The log tag for a strategy. `none` is the raw trajectory itself.
pub fn strategy_tag(strategy: Strategy) -> &'static str {
    match strategy {
        Strategy::None => RAW_TAG,
        s => s.as_str(),
    }
}

#[derive(Clone, Debug)]
pub struct ExperimentSummary {
    /// The fully resolved configuration that was run.
    pub config: ExperimentConfig,
    /// Per-epoch records keyed by tag (`raw` plus each ensemble strategy).
    pub histories: BTreeMap<String, Vec<MetricsRecord>>,
    pub gaps: BTreeMap<String, GapReport>,
    /// Raw checkpoint with the best robust test accuracy.
    pub best: Checkpoint,
    /// Final-epoch parameters keyed by tag.
    pub finals: BTreeMap<String, Checkpoint>,
    pub histograms: BTreeMap<String, Histogram>,
    pub landscapes: BTreeMap<String, LandscapeGrid>,
}

/// A resolved configuration together with its data.
#[derive(Clone, Debug)]
pub struct Experiment {
    pub config: ExperimentConfig,
    pub train: Dataset,
    pub test: Dataset,
}

impl Experiment {
    pub fn prepare(cfg: &ExperimentConfig) -> Result<Self> {
        let (config, train, test) = cfg.resolve()?;
        Ok(Experiment {
            config,
            train,
            test,
        })
    }

    /// BatchNorm recalibration batches: the training set in stored order.
    pub fn calibration_batches(&self) -> Result<Vec<Tensor>> {
        self.train.feature_batches(self.config.train.batch_size)
    }

    /// Clean and robust test accuracy of `model`, using the evaluation
    /// stream of `epoch`.
    pub fn evaluate(&self, model: &Model, epoch: usize) -> Result<(f64, f64)> {
        let t = &self.config.train;
        let clean = accuracy(model, &self.test, None)?;
        let robust = accuracy(
            model,
            &self.test,
            Some((&t.eval_attack, &eval_stream(t.seed, epoch))),
        )?;
        Ok((clean, robust))
    }

    /// Train and evaluate. With `out`, artifacts are written as they are
    /// produced; without it everything stays in memory.
    pub fn run(&self, out: Option<&Path>) -> Result<ExperimentSummary> {
        let cfg = &self.config;
        let store = match out {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                write_atomic(&dir.join("config.resolved.toml"), cfg.to_toml()?.as_bytes())?;
                CheckpointStore::open(dir.join("checkpoints"))?
            }
            None => CheckpointStore::in_memory(),
        };
        let log = out
            .map(|d| MetricsLog::create(d.join("metrics.jsonl")))
            .transpose()?;
        let mut sink = ExperimentSink {
            exp: self,
            calibration: self.calibration_batches()?,
            store,
            log,
            out: out.map(Path::to_path_buf),
            histories: BTreeMap::new(),
            finals: BTreeMap::new(),
        };
        let outcome =
            adversarial_train(&cfg.model, &cfg.train, &self.train, &self.test, &mut sink)?;
        let ExperimentSink {
            mut histories,
            mut finals,
            ..
        } = sink;
        histories.insert(RAW_TAG.to_string(), outcome.history.clone());
        finals.insert(
            RAW_TAG.to_string(),
            Checkpoint {
                epoch: cfg.train.total_epochs - 1,
                params: outcome.model.params.clone(),
                bnstats: outcome.model.bn.clone(),
            },
        );

        let gaps = histories
            .iter()
            .map(|(tag, h)| Ok((tag.clone(), gap_report(h)?)))
            .collect::<Result<BTreeMap<_, _>>>()?;
        let histograms = if cfg.outputs.histogram {
            self.histograms(&finals)?
        } else {
            BTreeMap::new()
        };
        let landscapes = if cfg.outputs.landscape {
            self.landscapes(&finals)?
        } else {
            BTreeMap::new()
        };

        if let Some(dir) = out {
            save_checkpoint(&outcome.best, dir.join("best.ckpt"))?;
            save_checkpoint(&finals[RAW_TAG], dir.join("last.ckpt"))?;
            write_json(&dir.join("gap_reports.json"), &gaps)?;
            if !histograms.is_empty() {
                write_json(&dir.join("histograms.json"), &histograms)?;
            }
            for (tag, grid) in &landscapes {
                write_json(&dir.join("landscape").join(format!("{tag}.json")), grid)?;
            }
        }

        Ok(ExperimentSummary {
            config: cfg.clone(),
            histories,
            gaps,
            best: outcome.best,
            finals,
            histograms,
            landscapes,
        })
    }

    /// Last-dense-layer weight histograms on one shared symmetric range.
    pub fn histograms(
        &self,
        finals: &BTreeMap<String, Checkpoint>,
    ) -> Result<BTreeMap<String, Histogram>> {
        let layer = self
            .config
            .model
            .last_dense()
            .ok_or_else(|| Error::Config("model has no dense layer".into()))?;
        let selector = format!("{layer}.weight");
        let mut bound = 0f32;
        for ckpt in finals.values() {
            for v in select_coordinates(&ckpt.params, &selector)? {
                bound = bound.max(v.abs());
            }
        }
        let bound = if bound > 0.0 { bound } else { 1.0 };
        finals
            .iter()
            .map(|(tag, ckpt)| {
                let h = weight_histogram(
                    &ckpt.params,
                    &selector,
                    self.config.outputs.histogram_bins,
                    (-bound, bound),
                )?;
                Ok((tag.clone(), h))
            })
            .collect()
    }

    /// Clean-loss landscapes on a seeded test subsample.
    pub fn landscapes(
        &self,
        finals: &BTreeMap<String, Checkpoint>,
    ) -> Result<BTreeMap<String, LandscapeGrid>> {
        let lc = &self.config.landscape;
        let sample = self.test.subsample(lc.sample_size, lc.direction_seed)?;
        finals
            .iter()
            .map(|(tag, ckpt)| {
                let model = ckpt.to_model(&self.config.model);
                let grid = landscape_grid(&model, &sample.features, &sample.labels, lc)?;
                Ok((tag.clone(), grid))
            })
            .collect()
    }
}

fn write_json<T: serde::Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

struct ExperimentSink<'a> {
    exp: &'a Experiment,
    calibration: Vec<Tensor>,
    store: CheckpointStore,
    log: Option<MetricsLog>,
    out: Option<PathBuf>,
    histories: BTreeMap<String, Vec<MetricsRecord>>,
    finals: BTreeMap<String, Checkpoint>,
}

impl TrainSink for ExperimentSink<'_> {
    fn on_checkpoint(&mut self, ckpt: &Checkpoint) -> Result<()> {
        self.store.push(ckpt.clone())
    }

    fn on_epoch(&mut self, record: &MetricsRecord, _model: &Model) -> Result<()> {
        if let Some(log) = &mut self.log {
            log.append(RAW_TAG, record)?;
        }
        let cfg = &self.exp.config;
        let total = cfg.train.total_epochs;
        for &strategy in &cfg.ensemble.strategies {
            if strategy == Strategy::None {
                continue;
            }
            let ens = cfg.ensemble.config_for(strategy);
            if self
                .store
                .window_epochs(ens.start_epoch(total), record.epoch)
                .is_empty()
            {
                continue;
            }
            let ckpt = finalize(
                &cfg.model,
                &self.store,
                &ens,
                total,
                record.epoch,
                &self.calibration,
            )?;
            let (clean, robust) = self
                .exp
                .evaluate(&ckpt.to_model(&cfg.model), record.epoch)?;
            let row = MetricsRecord {
                epoch: record.epoch,
                lr: record.lr,
                train_loss: None,
                train_clean_acc: None,
                train_robust_acc: None,
                test_clean_acc: clean,
                test_robust_acc: robust,
            };
            let tag = strategy_tag(strategy);
            if let Some(log) = &mut self.log {
                log.append(tag, &row)?;
            }
            if let Some(dir) = &self.out {
                save_checkpoint(
                    &ckpt,
                    dir.join("ensembles")
                        .join(tag)
                        .join(CheckpointStore::file_name(record.epoch)),
                )?;
            }
            self.histories.entry(tag.to_string()).or_default().push(row);
            self.finals.insert(tag.to_string(), ckpt);
        }
        Ok(())
    }
}

/// Check the output directory, then run with artifacts written to disk.
///
/// A directory that already holds files is refused unless `overwrite` is
/// set, in which case previous artifacts are removed first.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<ExperimentSummary> {
    let exp = Experiment::prepare(cfg)?;
    let dir = &exp.config.output_dir;
    prepare_output_dir(dir, exp.config.overwrite)?;
    exp.run(Some(dir))
}

pub fn prepare_output_dir(dir: &Path, overwrite: bool) -> Result<()> {
    let occupied = match std::fs::read_dir(dir) {
        Ok(mut entries) => entries.next().is_some(),
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => false,
        Err(e) => return Err(e.into()),
    };
    if occupied {
        if !overwrite {
            return Err(Error::Exists(dir.to_path_buf()));
        }
        for name in ARTIFACTS {
            let p = dir.join(name);
            if p.is_dir() {
                std::fs::remove_dir_all(&p)?;
            } else if p.exists() {
                std::fs::remove_file(&p)?;
            }
        }
    }
    std::fs::create_dir_all(dir)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::metrics_log::{read_log, records_with_tag};

    fn tiny() -> ExperimentConfig {
        let mut cfg = ExperimentConfig::default();
        cfg.set("dataset.n_per_class", "20").unwrap();
        cfg.set("train.total_epochs", "4").unwrap();
        cfg.set("train.batch_size", "16").unwrap();
        cfg.set("train.attack.steps", "2").unwrap();
        cfg.set("train.eval_attack.steps", "2").unwrap();
        cfg.set("landscape.resolution", "3").unwrap();
        cfg
    }

    #[test]
    fn writes_artifacts_and_refuses_reuse() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.output_dir = dir.path().join("run");
        let summary = run_experiment(&cfg).unwrap();
        let run = &cfg.output_dir;
        for f in [
            "config.resolved.toml",
            "metrics.jsonl",
            "best.ckpt",
            "last.ckpt",
            "gap_reports.json",
        ] {
            assert!(run.join(f).exists(), "{f}");
        }
        assert_eq!(
            CheckpointStore::open(run.join("checkpoints"))
                .unwrap()
                .len(),
            4
        );
        let entries = read_log(run.join("metrics.jsonl")).unwrap();
        assert_eq!(
            records_with_tag(&entries, RAW_TAG),
            summary.histories[RAW_TAG]
        );
        // start epoch round(0.5·4) = 2, so epochs 2 and 3 are evaluated
        assert_eq!(records_with_tag(&entries, "meat_median").len(), 2);
        assert!(run.join("ensembles/meat_median/epoch_000003.ckpt").exists());

        assert!(matches!(run_experiment(&cfg), Err(Error::Exists(_))));
        cfg.overwrite = true;
        let again = run_experiment(&cfg).unwrap();
        assert_eq!(again.histories, summary.histories);
        assert_eq!(
            read_log(run.join("metrics.jsonl")).unwrap().len(),
            entries.len()
        );
    }

    #[test]
    fn in_memory_run_matches_disk_run() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = tiny();
        cfg.outputs.landscape = false;
        cfg.output_dir = dir.path().join("run");
        let disk = run_experiment(&cfg).unwrap();
        let mem = Experiment::prepare(&cfg).unwrap().run(None).unwrap();
        assert_eq!(disk.histories, mem.histories);
        for (tag, ckpt) in &disk.finals {
            assert!(ckpt.bit_eq(&mem.finals[tag]), "{tag}");
        }
    }
}
