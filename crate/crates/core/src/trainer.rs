//! Patch-pair classifier training: momentum SGD on two-term cross entropy
//! with a stepped learning-rate schedule and early stopping on validation
//! loss. The best-validation checkpoint is written to disk and the network
//! is left holding those weights when training returns.

use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::net::scalar::Scalar;
use crate::net::tensor::Tensor;
use crate::net::{save_checkpoint, DbResNet, NetError};
use crate::patch::{MultiScalePatch, MultiViewPatch, PatchError};
use crate::sampler::{ManifestEntry, SampleManifest};

/// Predicted probabilities are clamped to `[PROB_CLAMP, 1 - PROB_CLAMP]`
/// before taking logs.
pub const PROB_CLAMP: f64 = 1e-7;

/// Epochs between learning-rate decay steps.
pub const LR_DECAY_PERIOD: usize = 5;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} is empty")]
    EmptySet(&'static str),
    #[error("labels ({0}) and predictions ({1}) differ in length")]
    LengthMismatch(usize, usize),
    #[error("label {0} is not 0 or 1")]
    InvalidLabel(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("{0} is not finite")]
    NonFinite(String),
    #[error(transparent)]
    Net(#[from] NetError),
    #[error(transparent)]
    Patch(#[from] PatchError),
}

/// Optimization hyperparameters. Defaults: lr 0.001 decayed by 0.9 every
/// 5 epochs, momentum 0.9, batches of 32, at most 20 epochs with patience
/// 10 on validation loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub initial_lr: f64,
    /// Multiplier applied to the rate every [`LR_DECAY_PERIOD`] epochs.
    pub lr_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    /// Consecutive epochs without strict validation improvement tolerated
    /// before stopping.
    pub patience: usize,
    /// Fraction of cases held out for validation when a caller splits a
    /// dataset with [`split_cases`].
    pub val_fraction: f64,
    /// Seeds the per-epoch shuffle of the training set.
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            initial_lr: 1e-3,
            lr_decay: 0.9,
            momentum: 0.9,
            batch_size: 32,
            max_epochs: 20,
            patience: 10,
            val_fraction: 0.2,
            seed: 7,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.initial_lr > 0.0 && self.initial_lr.is_finite()) {
            return bad(format!("initial_lr {} must be positive", self.initial_lr));
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            return bad(format!("lr_decay {} must be in (0, 1]", self.lr_decay));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum {} must be in [0, 1)", self.momentum));
        }
        if self.batch_size == 0 {
            return bad("batch_size must be at least 1".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be at least 1".into());
        }
        if self.patience > self.max_epochs {
            return bad(format!(
                "patience {} exceeds max_epochs {}",
                self.patience, self.max_epochs
            ));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad(format!("val_fraction {} must be in (0, 1)", self.val_fraction));
        }
        Ok(())
    }

    /// Learning rate for a zero-based epoch:
    /// `initial_lr * lr_decay^(epoch / LR_DECAY_PERIOD)`.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.initial_lr * self.lr_decay.powi((epoch / LR_DECAY_PERIOD) as i32)
    }
}

/// Mean two-term cross entropy over a batch. `predictions[i]` is the
/// predicted probability of class 1 for `labels[i]`; each term is
/// `-(y ln p + (1 - y) ln(1 - p))` with `p` clamped away from 0 and 1.
pub fn cross_entropy(labels: &[usize], predictions: &[f64]) -> Result<f64, TrainError> {
    if labels.is_empty() {
        return Err(TrainError::EmptySet("batch"));
    }
    if labels.len() != predictions.len() {
        return Err(TrainError::LengthMismatch(labels.len(), predictions.len()));
    }
    let mut sum = 0.0;
    for (&y, &p) in labels.iter().zip(predictions) {
        if y > 1 {
            return Err(TrainError::InvalidLabel(y));
        }
        if !p.is_finite() {
            return Err(TrainError::NonFinite(format!("prediction {p}")));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        sum -= if y == 1 { p.ln() } else { (1.0 - p).ln() };
    }
    Ok(sum / labels.len() as f64)
}

/// One momentum-SGD update: `v = momentum * v + g`, `p = p - lr * v`.
/// A non-finite gradient aborts the step with its location.
pub fn sgd_momentum_step<S: Scalar>(
    param: &mut [S],
    grad: &[S],
    velocity: &mut [S],
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(TrainError::Shape(format!(
            "param {} / grad {} / velocity {}",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    let mu = S::from_f64(momentum);
    let rate = S::from_f64(lr);
    for i in 0..param.len() {
        let g = grad[i];
        if !g.is_finite() {
            return Err(TrainError::NonFinite(format!("gradient at offset {i}")));
        }
        velocity[i] = mu * velocity[i] + g;
        param[i] -= rate * velocity[i];
    }
    Ok(())
}

/// What an epoch's validation loss means for the training loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopCheck {
    Improved,
    Wait,
    Stop,
}

/// Tracks the best validation loss seen and how many consecutive epochs
/// have passed without strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStop {
    patience: usize,
    best: Option<(usize, f64)>,
    stale: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: None,
            stale: 0,
        }
    }

    /// Records one epoch. Only a strictly lower loss counts as improvement
    /// and resets the stale counter.
    pub fn observe(&mut self, epoch: usize, val_loss: f64) -> StopCheck {
        match self.best {
            Some((_, best)) if val_loss >= best => {
                self.stale += 1;
                if self.stale >= self.patience {
                    StopCheck::Stop
                } else {
                    StopCheck::Wait
                }
            }
            _ => {
                self.best = Some((epoch, val_loss));
                self.stale = 0;
                StopCheck::Improved
            }
        }
    }

    /// `(epoch, val_loss)` of the best epoch so far.
    pub fn best(&self) -> Option<(usize, f64)> {
        self.best
    }
}

/// Per-epoch record emitted by [`train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub seconds: f64,
}

impl EpochStats {
    /// Stable `key=value` line:
    /// `epoch=E lr=L train_loss=T val_loss=V seconds=S`.
    pub fn log_line(&self) -> String {
        format!(
            "epoch={} lr={} train_loss={} val_loss={} seconds={:.3}",
            self.epoch, self.lr, self.train_loss, self.val_loss, self.seconds
        )
    }
}

/// Summary of a finished run. `history` covers every epoch that ran.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_loss: f64,
    pub stopped_early: bool,
}

/// Source of input patch pairs, keyed by manifest entries.
pub trait PatchProvider {
    /// Side length of every returned patch channel.
    fn view_size(&self) -> usize;

    fn patch_pair(
        &self,
        entry: &ManifestEntry,
    ) -> Result<(MultiViewPatch, MultiScalePatch), PatchError>;
}

fn assemble_batch<S: Scalar>(
    provider: &dyn PatchProvider,
    manifest: &SampleManifest,
    idxs: &[usize],
) -> Result<(Tensor<S>, Tensor<S>, Vec<usize>), TrainError> {
    let n = idxs.len();
    let size = provider.view_size();
    let mut a = Tensor::zeros(n, 3, size, size);
    let mut b = Tensor::zeros(n, 3, size, size);
    let mut labels = Vec::with_capacity(n);
    for (s, &i) in idxs.iter().enumerate() {
        let entry = &manifest.entries[i];
        let (mv, ms) = provider.patch_pair(entry)?;
        if mv.0.size() != size || ms.0.size() != size {
            return Err(TrainError::Shape(format!(
                "provider returned patch sides {} and {}, declared {}",
                mv.0.size(),
                ms.0.size(),
                size
            )));
        }
        for (dst, &v) in a.sample_mut(s).iter_mut().zip(mv.0.data()) {
            *dst = S::from_f64(v);
        }
        for (dst, &v) in b.sample_mut(s).iter_mut().zip(ms.0.data()) {
            *dst = S::from_f64(v);
        }
        labels.push(entry.label.as_index());
    }
    Ok((a, b, labels))
}

fn nodule_probs<S: Scalar>(probs: &[S], n: usize) -> Vec<f64> {
    (0..n).map(|s| probs[s * 2 + 1].to_f64()).collect()
}

/// Mean cross entropy of the network over a whole manifest, batched,
/// in inference mode.
pub fn validation_loss<S: Scalar>(
    net: &mut DbResNet<S>,
    manifest: &SampleManifest,
    provider: &dyn PatchProvider,
    batch_size: usize,
) -> Result<f64, TrainError> {
    if manifest.is_empty() {
        return Err(TrainError::EmptySet("validation set"));
    }
    let idxs: Vec<usize> = (0..manifest.len()).collect();
    let mut sum = 0.0;
    for chunk in idxs.chunks(batch_size.max(1)) {
        let (a, b, labels) = assemble_batch::<S>(provider, manifest, chunk)?;
        let probs = net.forward(&a, &b, false)?;
        let loss = cross_entropy(&labels, &nodule_probs(&probs, labels.len()))?;
        sum += loss * labels.len() as f64;
    }
    Ok(sum / manifest.len() as f64)
}

fn apply_sgd<S: Scalar>(
    net: &mut DbResNet<S>,
    velocity: &mut [S],
    lr: f64,
    momentum: f64,
) -> Result<(), TrainError> {
    let mut off = 0;
    let mut slice_idx = 0;
    let mut failed: Option<TrainError> = None;
    net.for_each_param(&mut |p, g| {
        let v = &mut velocity[off..off + p.len()];
        off += p.len();
        if failed.is_none() {
            if let Err(e) = sgd_momentum_step(p, g, v, lr, momentum) {
                failed = Some(match e {
                    TrainError::NonFinite(what) => {
                        TrainError::NonFinite(format!("parameter slice {slice_idx}: {what}"))
                    }
                    other => other,
                });
            }
        }
        slice_idx += 1;
    });
    debug_assert_eq!(off, velocity.len());
    match failed {
        Some(e) => Err(e),
        None => Ok(()),
    }
}

fn train_batch<S: Scalar>(
    net: &mut DbResNet<S>,
    manifest: &SampleManifest,
    provider: &dyn PatchProvider,
    idxs: &[usize],
    velocity: &mut [S],
    lr: f64,
    momentum: f64,
) -> Result<f64, TrainError> {
    let (a, b, labels) = assemble_batch::<S>(provider, manifest, idxs)?;
    let n = labels.len();
    net.zero_grad();
    let probs = net.forward(&a, &b, true)?;
    let loss = cross_entropy(&labels, &nodule_probs(&probs, n))?;
    let inv = S::from_f64(1.0 / n as f64);
    let mut dlogits = vec![S::zero(); n * 2];
    for (s, &y) in labels.iter().enumerate() {
        let t1 = if y == 1 { S::one() } else { S::zero() };
        dlogits[s * 2] = (probs[s * 2] - (S::one() - t1)) * inv;
        dlogits[s * 2 + 1] = (probs[s * 2 + 1] - t1) * inv;
    }
    net.backward(&dlogits);
    apply_sgd(net, velocity, lr, momentum)?;
    Ok(loss)
}

fn capture_weights<S: Scalar>(net: &mut DbResNet<S>) -> Vec<S> {
    let mut buf = Vec::new();
    net.for_each_param(&mut |p, _| buf.extend_from_slice(p));
    net.for_each_state(&mut |s| buf.extend_from_slice(s));
    buf
}

fn restore_weights<S: Scalar>(net: &mut DbResNet<S>, buf: &[S]) {
    let mut off = 0;
    net.for_each_param(&mut |p, _| {
        p.copy_from_slice(&buf[off..off + p.len()]);
        off += p.len();
    });
    net.for_each_state(&mut |s| {
        s.copy_from_slice(&buf[off..off + s.len()]);
        off += s.len();
    });
    assert_eq!(off, buf.len(), "weight snapshot length");
}

/// Trains `net` on `train_set`, monitoring mean validation loss each epoch.
/// The training order is reshuffled per epoch from `cfg.seed`, the rate
/// follows [`TrainConfig::lr_at`], and training stops at `max_epochs` or
/// once `patience` consecutive epochs bring no strict improvement. The best
/// epoch's checkpoint is written to `checkpoint_path` and its weights are
/// restored into `net` before returning. `on_epoch` sees every epoch's
/// stats as they complete.
pub fn train<S: Scalar>(
    net: &mut DbResNet<S>,
    train_set: &SampleManifest,
    val_set: &SampleManifest,
    provider: &dyn PatchProvider,
    cfg: &TrainConfig,
    checkpoint_path: &Path,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySet("training set"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySet("validation set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut velocity = vec![S::zero(); net.actual_param_count()];
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut monitor = EarlyStop::new(cfg.patience);
    let mut best_weights = Vec::new();
    let mut history = Vec::new();
    let mut stopped_early = false;
    for epoch in 0..cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let lr = cfg.lr_at(epoch);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            let loss = train_batch(net, train_set, provider, chunk, &mut velocity, lr, cfg.momentum)?;
            loss_sum += loss * chunk.len() as f64;
        }
        let train_loss = loss_sum / train_set.len() as f64;
        if !train_loss.is_finite() {
            return Err(TrainError::NonFinite(format!("training loss at epoch {epoch}")));
        }
        let val_loss = validation_loss(net, val_set, provider, cfg.batch_size)?;
        if !val_loss.is_finite() {
            return Err(TrainError::NonFinite(format!("validation loss at epoch {epoch}")));
        }
        let stats = EpochStats {
            epoch,
            lr,
            train_loss,
            val_loss,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&stats);
        history.push(stats);
        match monitor.observe(epoch, val_loss) {
            StopCheck::Improved => {
                best_weights = capture_weights(net);
                save_checkpoint(net, epoch, Some(val_loss), checkpoint_path)?;
            }
            StopCheck::Wait => {}
            StopCheck::Stop => {
                stopped_early = true;
                break;
            }
        }
    }
    let (best_epoch, best_val_loss) = monitor.best().expect("at least one epoch ran");
    restore_weights(net, &best_weights);
    Ok(TrainOutcome {
        history,
        best_epoch,
        best_val_loss,
        stopped_early,
    })
}
