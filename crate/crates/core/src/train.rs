//! Mini-batch Adam training with a reduce-on-plateau learning-rate schedule.

use nowcast_tensor::{AdamConfig, AdamState, Graph, Tensor, Var};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{CoreError, Result};
use crate::losses::{self, ClassScheme, LossValue};
use crate::network::{HeadKind, Mode, NetworkParams};
use crate::seeds::derive_seed;

/// One training example: inputs `[C, T, M, N]`, target rates `[T_f, M, N]`
/// and an optional validity mask over the target.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub input: Tensor,
    pub target: Tensor,
    pub valid: Option<Vec<bool>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Focal,
}

impl LossKind {
    pub fn head(self) -> HeadKind {
        match self {
            LossKind::Mse => HeadKind::Regression,
            LossKind::Focal => HeadKind::Classification,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub adam: AdamConfig,
    /// Epochs without validation improvement before the rate is cut.
    pub patience: usize,
    pub decay: f64,
    pub focal_gamma: f64,
    pub loss: LossKind,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 10,
            batch_size: 8,
            adam: AdamConfig::default(),
            patience: 10,
            decay: 0.1,
            focal_gamma: 2.0,
            loss: LossKind::Mse,
        }
    }
}

/// Multiplies the learning rate by `factor` once `patience` consecutive
/// observations fail to improve on the best; the counter then restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub lr: f64,
    pub factor: f64,
    pub patience: usize,
    pub best: f64,
    pub wait: usize,
}

impl PlateauScheduler {
    pub fn new(lr: f64, factor: f64, patience: usize) -> Self {
        PlateauScheduler {
            lr,
            factor,
            patience,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Records a validation loss; returns true when the rate was reduced.
    pub fn observe(&mut self, loss: f64) -> bool {
        if loss < self.best {
            self.best = loss;
            self.wait = 0;
            return false;
        }
        self.wait += 1;
        if self.wait >= self.patience {
            self.lr *= self.factor;
            self.wait = 0;
            return true;
        }
        false
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct History {
    pub train_loss: Vec<f64>,
    pub val_loss: Vec<f64>,
    pub lr: Vec<f64>,
}

/// Stacks samples into `[B, C, T, M, N]` inputs, `[B, T_f, M, N]` targets
/// and a flattened mask (present if any sample carries one).
pub fn collate(samples: &[&Sample]) -> Result<(Tensor, Tensor, Option<Vec<bool>>)> {
    let first = samples.first().ok_or_else(|| CoreError::invalid("collate", "empty batch"))?;
    let (is, ts) = (first.input.shape().to_vec(), first.target.shape().to_vec());
    let mut xs = Vec::with_capacity(samples.len() * first.input.len());
    let mut ys = Vec::with_capacity(samples.len() * first.target.len());
    let any_mask = samples.iter().any(|s| s.valid.is_some());
    let mut mask = Vec::new();
    for s in samples {
        if s.input.shape() != is.as_slice() || s.target.shape() != ts.as_slice() {
            return Err(CoreError::invalid("collate", "samples in a batch must share shapes"));
        }
        xs.extend_from_slice(s.input.data());
        ys.extend_from_slice(s.target.data());
        if any_mask {
            match &s.valid {
                Some(v) => mask.extend_from_slice(v),
                None => mask.extend(std::iter::repeat_n(true, s.target.len())),
            }
        }
    }
    let mut xshape = vec![samples.len()];
    xshape.extend(is);
    let mut yshape = vec![samples.len()];
    yshape.extend(ts);
    Ok((Tensor::new(xshape, xs)?, Tensor::new(yshape, ys)?, any_mask.then_some(mask)))
}

/// Records the loss of `output` against target rates `[B, T_f, M, N]`.
pub fn loss_on(
    g: &mut Graph,
    output: Var,
    target: &Tensor,
    valid: Option<&[bool]>,
    kind: LossKind,
    scheme: &ClassScheme,
    gamma: f64,
) -> Result<(Var, LossValue)> {
    match kind {
        LossKind::Mse => losses::mse_loss_on(g, output, target, valid),
        LossKind::Focal => {
            let fill: Option<Vec<bool>> = valid.map(|v| v.iter().map(|b| !b).collect());
            let classes = losses::bin_classes(target.data(), fill.as_deref(), scheme)?;
            let (y, mask) = losses::one_hot(&classes, target.shape(), scheme.n_classes())?;
            losses::focal_loss_on(g, output, &y, &scheme.weights, gamma, Some(&mask))
        }
    }
}

/// Per-channel mean and standard deviation of `[C, T, M, N]` inputs; a
/// near-constant channel gets a unit scale.
pub fn channel_statistics(samples: &[Sample]) -> Result<(Vec<f64>, Vec<f64>)> {
    let first = samples
        .first()
        .ok_or_else(|| CoreError::invalid("channel statistics", "no samples"))?;
    let c = first.input.shape()[0];
    let (mut sum, mut sq, mut count) = (vec![0.0; c], vec![0.0; c], 0usize);
    for s in samples {
        if s.input.shape() != first.input.shape() {
            return Err(CoreError::invalid("channel statistics", "samples must share shapes"));
        }
        let per = s.input.len() / c;
        for (ci, plane) in s.input.data().chunks(per).enumerate() {
            sum[ci] += plane.iter().sum::<f64>();
            sq[ci] += plane.iter().map(|v| v * v).sum::<f64>();
        }
        count += per;
    }
    let n = count as f64;
    let mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
    let std = sq
        .iter()
        .zip(&mean)
        .map(|(q, m)| {
            let sd = (q / n - m * m).max(0.0).sqrt();
            if sd > 1e-6 {
                sd
            } else {
                1.0
            }
        })
        .collect();
    Ok((mean, std))
}

/// Class weights from the inverse class frequencies of the training targets.
pub fn weighted_scheme(samples: &[Sample], base: &ClassScheme) -> Result<ClassScheme> {
    let mut counts = vec![0u64; base.n_classes()];
    for s in samples {
        let fill: Option<Vec<bool>> = s.valid.as_ref().map(|v| v.iter().map(|b| !b).collect());
        for c in losses::bin_classes(s.target.data(), fill.as_deref(), base)?.into_iter().flatten() {
            counts[c - 1] += 1;
        }
    }
    let total: u64 = counts.iter().sum();
    if total == 0 {
        return Err(CoreError::invalid("class weights", "training targets contain no valid pixels"));
    }
    let freqs: Vec<f64> = counts.iter().map(|&c| c as f64 / total as f64).collect();
    base.clone().with_weights(losses::class_weights(&freqs))
}

/// One optimizer update on a batch; returns the batch loss before the update.
pub fn train_step(
    params: &mut NetworkParams,
    adam: &mut AdamState,
    batch: &[&Sample],
    cfg: &TrainConfig,
    scheme: &ClassScheme,
    seed: u64,
) -> Result<LossValue> {
    let (x, y, valid) = collate(batch)?;
    let mut g = Graph::new();
    let fwd = params.forward_on(&mut g, &x, Mode::Train { seed })?;
    let (loss, value) = loss_on(&mut g, fwd.output, &y, valid.as_deref(), cfg.loss, scheme, cfg.focal_gamma)?;
    if !value.value.is_finite() {
        return Err(CoreError::NonFiniteLoss { epoch: 0, batch: 0 });
    }
    let grads = g.backward(loss)?;
    let names: Vec<&String> = params.params.keys().collect();
    let grad_list: Vec<Tensor> = names.iter().map(|n| grads.get_or_zeros(fwd.vars[*n], &params.params[*n])).collect();
    let mut current: Vec<Tensor> = params.params.values().cloned().collect();
    adam.step(&mut current, &grad_list)?;
    for (slot, t) in params.params.values_mut().zip(current) {
        *slot = t;
    }
    params.stats = fwd.stats;
    Ok(value)
}

/// Sample-weighted mean loss in eval mode.
pub fn evaluate_loss(params: &NetworkParams, samples: &[Sample], cfg: &TrainConfig, scheme: &ClassScheme) -> Result<f64> {
    if samples.is_empty() {
        return Err(CoreError::invalid("validation", "no samples"));
    }
    let mut total = 0.0;
    for chunk in samples.chunks(cfg.batch_size.max(1)) {
        let refs: Vec<&Sample> = chunk.iter().collect();
        let (x, y, valid) = collate(&refs)?;
        let mut g = Graph::new();
        let fwd = params.forward_on(&mut g, &x, Mode::Eval)?;
        let (_, value) = loss_on(&mut g, fwd.output, &y, valid.as_deref(), cfg.loss, scheme, cfg.focal_gamma)?;
        total += value.value * chunk.len() as f64;
    }
    Ok(total / samples.len() as f64)
}

/// Progress of one finished epoch.
#[derive(Clone, Debug)]
pub struct EpochReport {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub improved: bool,
}

pub struct TrainOutcome {
    /// Parameters and optimizer state at the lowest validation loss.
    pub best: Checkpoint,
    /// State after the final epoch.
    pub last: Checkpoint,
}

/// Trains `init` for `cfg.epochs` epochs. Each epoch reshuffles the training
/// set with a seed derived from `seed` and the epoch index.
pub fn train(
    init: NetworkParams,
    train_set: &[Sample],
    val_set: &[Sample],
    cfg: &TrainConfig,
    seed: u64,
    mut progress: impl FnMut(&EpochReport),
) -> Result<TrainOutcome> {
    if init.config.head != cfg.loss.head() {
        return Err(CoreError::invalid(
            "train",
            format!(
                "{:?} loss needs a {:?} head, network has {:?}",
                cfg.loss,
                cfg.loss.head(),
                init.config.head
            ),
        ));
    }
    if cfg.batch_size == 0 {
        return Err(CoreError::invalid("train", "batch size must be positive"));
    }
    let scheme = match cfg.loss {
        LossKind::Focal if !train_set.is_empty() => weighted_scheme(train_set, &ClassScheme::default())?,
        _ => ClassScheme::default(),
    };
    let mut params = init;
    let initial: Vec<Tensor> = params.params.values().cloned().collect();
    let mut adam = AdamState::new(cfg.adam, &initial);
    let mut sched = PlateauScheduler::new(cfg.adam.lr, cfg.decay, cfg.patience);
    let mut history = History::default();
    let snapshot = |params: &NetworkParams, adam: &AdamState, epoch: usize, history: &History| Checkpoint {
        params: params.clone(),
        scheme: scheme.clone(),
        loss: cfg.loss,
        adam: Some(adam.clone()),
        epoch,
        history: history.clone(),
    };
    let mut best = snapshot(&params, &adam, 0, &history);
    let mut best_val = f64::INFINITY;
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut step = 0u64;

    for epoch in 1..=cfg.epochs {
        if train_set.is_empty() {
            return Err(CoreError::invalid("train", "empty training set"));
        }
        adam.config.lr = sched.lr;
        order.sort_unstable();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
        let mut epoch_loss = 0.0;
        for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<&Sample> = chunk.iter().map(|&i| &train_set[i]).collect();
            step += 1;
            let value = train_step(&mut params, &mut adam, &batch, cfg, &scheme, derive_seed(seed ^ 0xD0, step)).map_err(|e| match e {
                CoreError::NonFiniteLoss { .. } | CoreError::Tensor(nowcast_tensor::TensorError::NonFiniteGradient { .. }) => {
                    CoreError::NonFiniteLoss { epoch, batch: bi }
                }
                other => other,
            })?;
            epoch_loss += value.value * batch.len() as f64;
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let val_loss = if val_set.is_empty() {
            train_loss
        } else {
            evaluate_loss(&params, val_set, cfg, &scheme)?
        };
        if !val_loss.is_finite() {
            return Err(CoreError::NonFiniteLoss { epoch, batch: 0 });
        }
        history.train_loss.push(train_loss);
        history.val_loss.push(val_loss);
        history.lr.push(sched.lr);
        let improved = val_loss < best_val;
        if improved {
            best_val = val_loss;
            best = snapshot(&params, &adam, epoch, &history);
        }
        sched.observe(val_loss);
        progress(&EpochReport {
            epoch,
            train_loss,
            val_loss,
            lr: adam.config.lr,
            improved,
        });
    }
    best.history = history.clone();
    let last = snapshot(&params, &adam, cfg.epochs, &history);
    Ok(TrainOutcome { best, last })
}
