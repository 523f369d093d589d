//! Outer minimization: momentum SGD with coupled weight decay, the stepwise
//! learning-rate schedule, and the adversarial-training epoch loop.

use serde::{Deserialize, Serialize};

use crate::analysis::accuracy;
use crate::attack::{pgd, AttackConfig};
use crate::diffnet::{backward, loss_xent, Mode, Model, ModelSpec, NamedParams};
use crate::ensemble::Checkpoint;
use crate::error::{argument, usage, Result};
use crate::harness::{Dataset, TrainSink};
use crate::numcore::RngState;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_epochs: usize,
    pub batch_size: usize,
    pub base_lr: f64,
    /// Epoch fractions at which the learning rate steps down.
    pub lr_decay_fractions: [f64; 2],
    /// Learning rates in effect after each decay point.
    pub lr_decay_values: [f64; 2],
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Attack used to build training examples.
    pub attack: AttackConfig,
    /// Attack used for per-epoch robust test accuracy.
    pub eval_attack: AttackConfig,
    /// Epochs per emitted checkpoint.
    pub snapshot_cadence: usize,
}

impl Default for TrainConfig {
    /// 120 epochs of SGD(0.9) with weight decay 5e-4. The learning rate
    /// steps 0.1 → 0.01 → 0.001 at one and two thirds of training. Training
    /// uses PGD-10; evaluation uses PGD-20.
    fn default() -> Self {
        let attack = AttackConfig::default();
        TrainConfig {
            total_epochs: 120,
            batch_size: 128,
            base_lr: 0.1,
            lr_decay_fractions: [1.0 / 3.0, 2.0 / 3.0],
            lr_decay_values: [0.01, 0.001],
            momentum: 0.9,
            weight_decay: 5e-4,
            seed: 0,
            attack,
            eval_attack: attack.with_steps(20),
            snapshot_cadence: 1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let [f1, f2] = self.lr_decay_fractions;
        if !(0.0 < f1 && f1 < f2 && f2 < 1.0) {
            return Err(argument(format!(
                "lr decay fractions must satisfy 0 < {f1} < {f2} < 1"
            )));
        }
        let coeffs = [
            self.base_lr,
            self.lr_decay_values[0],
            self.lr_decay_values[1],
            self.momentum,
            self.weight_decay,
        ];
        if coeffs.iter().any(|c| !(*c >= 0.0 && c.is_finite())) {
            return Err(argument(
                "learning rates, momentum and weight decay must be >= 0",
            ));
        }
        if self.total_epochs == 0 || self.batch_size == 0 || self.snapshot_cadence == 0 {
            return Err(argument(
                "total_epochs, batch_size and snapshot_cadence must be positive",
            ));
        }
        self.attack.validate()?;
        self.eval_attack.validate()
    }

    /// First epochs of the second and third schedule segments.
    pub fn decay_epochs(&self) -> [usize; 2] {
        let at = |f: f64| (f * self.total_epochs as f64).round() as usize;
        [
            at(self.lr_decay_fractions[0]),
            at(self.lr_decay_fractions[1]),
        ]
    }
}

/// Learning rate in effect during `epoch` (0-based).
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch >= cfg.total_epochs {
        return Err(argument(format!(
            "epoch {epoch} outside [0, {})",
            cfg.total_epochs
        )));
    }
    let [d1, d2] = cfg.decay_epochs();
    Ok(if epoch < d1 {
        cfg.base_lr
    } else if epoch < d2 {
        cfg.lr_decay_values[0]
    } else {
        cfg.lr_decay_values[1]
    })
}

/// Momentum buffers, aligned with the parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    pub velocity: NamedParams,
}

impl OptState {
    pub fn zeros_like(params: &NamedParams) -> Self {
        OptState {
            velocity: params.map(|_| 0.0),
        }
    }
}

/// `g' = g + wd·θ; v' = μ·v + g'; θ' = θ − lr·v'`.
pub fn sgd_step(
    params: &NamedParams,
    grads: &NamedParams,
    opt: &OptState,
    lr: f64,
    cfg: &TrainConfig,
) -> Result<(NamedParams, OptState)> {
    params
        .check_aligned(grads)
        .and_then(|_| params.check_aligned(&opt.velocity))
        .map_err(|e| usage(format!("sgd_step: {e}")))?;
    let mut new_params = Vec::with_capacity(params.len());
    let mut new_vel = Vec::with_capacity(params.len());
    for ((p, g), v) in params.iter().zip(grads.iter()).zip(opt.velocity.iter()) {
        let mut pt = p.tensor.clone();
        let mut vt = v.tensor.clone();
        for ((theta, &grad), vel) in pt
            .data_mut()
            .iter_mut()
            .zip(g.tensor.data())
            .zip(vt.data_mut().iter_mut())
        {
            let gd = f64::from(grad) + cfg.weight_decay * f64::from(*theta);
            let vd = cfg.momentum * f64::from(*vel) + gd;
            *vel = vd as f32;
            *theta = (f64::from(*theta) - lr * vd) as f32;
        }
        new_params.push(pt);
        new_vel.push(vt);
    }
    Ok((
        params.with_tensors(new_params)?,
        OptState {
            velocity: opt.velocity.with_tensors(new_vel)?,
        },
    ))
}

/// One row of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub lr: f64,
    /// Mean adversarial training loss; absent for ensemble evaluations.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_loss: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_clean_acc: Option<f64>,
    /// Accuracy on the adversarial training batches as they were trained on.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub train_robust_acc: Option<f64>,
    pub test_clean_acc: f64,
    pub test_robust_acc: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: Model,
    /// Checkpoint with the highest robust test accuracy (earliest on ties).
    pub best: Checkpoint,
    pub history: Vec<MetricsRecord>,
}

// Substream tags under the run seed.
pub(crate) const STREAM_INIT: u64 = 1;
pub(crate) const STREAM_EPOCH: u64 = 2;
pub(crate) const STREAM_EVAL: u64 = 3;

/// Deterministic robust-evaluation stream for `epoch`.
pub fn eval_stream(seed: u64, epoch: usize) -> RngState {
    RngState::new(seed)
        .substream(STREAM_EVAL)
        .substream(epoch as u64)
}

/// Adversarial training: PGD examples generated with eval-mode BatchNorm,
/// outer update with train-mode BatchNorm, per-epoch evaluation and
/// checkpoint emission through `sink`.
pub fn adversarial_train(
    spec: &ModelSpec,
    cfg: &TrainConfig,
    train: &Dataset,
    test: &Dataset,
    sink: &mut dyn TrainSink,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train.is_empty() || test.is_empty() {
        return Err(argument("training and test sets must be nonempty"));
    }
    let root = RngState::new(cfg.seed);
    let mut model = Model::init(spec.clone(), &mut root.substream(STREAM_INIT))?;
    let mut opt = OptState::zeros_like(&model.params);
    let mut history = Vec::with_capacity(cfg.total_epochs);
    let mut best: Option<(f64, Checkpoint)> = None;

    for epoch in 0..cfg.total_epochs {
        let lr = lr_at(epoch, cfg)?;
        let epoch_rng = root.substream(STREAM_EPOCH).substream(epoch as u64);
        let order = epoch_rng.substream(0).permutation(train.len());
        let attack_root = epoch_rng.substream(1);

        let mut loss_sum = 0.0;
        let mut robust_correct = 0usize;
        let mut seen = 0usize;
        for (b, chunk) in order.chunks(cfg.batch_size).enumerate() {
            // a one-row batch has no batch statistics
            if chunk.len() < 2 {
                continue;
            }
            let (x, y) = train.batch(chunk)?;
            let x_adv = if cfg.attack.epsilon > 0.0 {
                pgd(
                    &model,
                    &x,
                    &y,
                    &cfg.attack,
                    &mut attack_root.substream(b as u64),
                )?
            } else {
                x
            };
            let f = model.forward(&x_adv, Mode::Train)?;
            loss_sum += loss_xent(&f.logits, &y)? * chunk.len() as f64;
            robust_correct += f
                .logits
                .argmax_rows()?
                .iter()
                .zip(&y)
                .filter(|(p, t)| p == t)
                .count();
            seen += chunk.len();
            let grads = backward(&f.cache, &y)?;
            let (params, next) = sgd_step(&model.params, &grads.params, &opt, lr, cfg)?;
            model.params = params;
            model.bn = f.bnstats.expect("train mode returns statistics");
            opt = next;
        }

        let record = MetricsRecord {
            epoch,
            lr,
            train_loss: Some(loss_sum / seen.max(1) as f64),
            train_clean_acc: Some(accuracy(&model, train, None)?),
            train_robust_acc: Some(robust_correct as f64 / seen.max(1) as f64),
            test_clean_acc: accuracy(&model, test, None)?,
            test_robust_acc: accuracy(
                &model,
                test,
                Some((&cfg.eval_attack, &eval_stream(cfg.seed, epoch))),
            )?,
        };

        let ckpt = Checkpoint {
            epoch,
            params: model.params.clone(),
            bnstats: model.bn.clone(),
        };
        if best
            .as_ref()
            .is_none_or(|(r, _)| record.test_robust_acc > *r)
        {
            best = Some((record.test_robust_acc, ckpt.clone()));
        }
        if (epoch + 1) % cfg.snapshot_cadence == 0 {
            sink.on_checkpoint(&ckpt)?;
        }
        sink.on_epoch(&record, &model)?;
        history.push(record);
    }

    Ok(TrainOutcome {
        model,
        best: best.expect("at least one epoch").1,
        history,
    })
}
