//! Training loop: approximate forward, exact backward, parameter updates.
//!
//! The per-batch sequence for an approximate convolution is fixed: update
//! the running input mean, clip inputs to twice the batch mean, clip weights
//! to twice their per-filter mean, rescale, run the smin forward, then
//! backpropagate through the exact convolution of the clipped operands with
//! clip-gradient masking. Exact-mode networks train as ordinary CNNs.

use crate::approx::Phase;
use crate::data::{Dataset, Shuffle};
use crate::error::{Error, Result};
use crate::nn::{softmax_xent, Network};
use crate::tensor::{Scalar, Tensor};

/// Parameter update rule.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum OptimizerKind {
    Sgd { lr: f64, momentum: f64 },
    Adam { lr: f64, beta1: f64, beta2: f64, eps: f64 },
}

impl OptimizerKind {
    pub fn base_lr(&self) -> f64 {
        match *self {
            OptimizerKind::Sgd { lr, .. } | OptimizerKind::Adam { lr, .. } => lr,
        }
    }

    pub fn with_lr(self, lr: f64) -> Self {
        match self {
            OptimizerKind::Sgd { momentum, .. } => OptimizerKind::Sgd { lr, momentum },
            OptimizerKind::Adam { beta1, beta2, eps, .. } => {
                OptimizerKind::Adam { lr, beta1, beta2, eps }
            }
        }
    }
}

/// Learning-rate schedule, evaluated once per epoch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum LrSchedule {
    Constant,
    /// Multiply by `factor` when an epoch crosses 50% and again at 75% of
    /// the configured epoch budget.
    StepDecay { factor: f64 },
}

impl LrSchedule {
    /// Learning-rate multiplier for 0-based `epoch` out of `total`.
    pub fn multiplier(&self, epoch: usize, total: usize) -> f64 {
        match *self {
            LrSchedule::Constant => 1.0,
            LrSchedule::StepDecay { factor } => {
                let m1 = total / 2;
                let m2 = total * 3 / 4;
                let mut mult = 1.0;
                if total > 1 && epoch >= m1 {
                    mult *= factor;
                }
                if total > 1 && epoch >= m2 && m2 > m1 {
                    mult *= factor;
                }
                mult
            }
        }
    }
}

/// Everything a training run needs besides the network and the data.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub batch_size: usize,
    pub epochs: usize,
    pub optimizer: OptimizerKind,
    pub schedule: LrSchedule,
    /// Momentum of the running input means.
    pub gamma: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 64,
            epochs: 5,
            optimizer: OptimizerKind::Sgd { lr: 0.01, momentum: 0.9 },
            schedule: LrSchedule::StepDecay { factor: 0.1 },
            gamma: 0.99,
            seed: 0,
        }
    }
}

enum OptState<T> {
    Sgd { velocity: Vec<Vec<T>> },
    Adam { m: Vec<Vec<T>>, v: Vec<Vec<T>>, t: u64 },
}

/// Optimizer with its per-parameter state buffers.
pub struct Optimizer<T> {
    pub kind: OptimizerKind,
    state: OptState<T>,
}

impl<T: Scalar> Optimizer<T> {
    pub fn new(kind: OptimizerKind) -> Self {
        let state = match kind {
            OptimizerKind::Sgd { .. } => OptState::Sgd { velocity: Vec::new() },
            OptimizerKind::Adam { .. } => OptState::Adam { m: Vec::new(), v: Vec::new(), t: 0 },
        };
        Optimizer { kind, state }
    }

    /// One update over every parameter of the network, with the learning
    /// rate scaled by `lr_mult`.
    pub fn step(&mut self, net: &mut Network<T>, lr_mult: f64) {
        match (&mut self.state, self.kind) {
            (OptState::Sgd { velocity }, OptimizerKind::Sgd { lr, momentum }) => {
                let lr = T::from_f64(lr * lr_mult);
                let momentum = T::from_f64(momentum);
                let mut slot = 0usize;
                net.for_each_param(|param, grad| {
                    if velocity.len() == slot {
                        velocity.push(vec![T::zero(); param.len()]);
                    }
                    let vel = &mut velocity[slot];
                    for ((p, &g), v) in param.iter_mut().zip(grad).zip(vel.iter_mut()) {
                        *v = momentum * *v + g;
                        *p -= lr * *v;
                    }
                    slot += 1;
                });
            }
            (OptState::Adam { m, v, t }, OptimizerKind::Adam { lr, beta1, beta2, eps }) => {
                *t += 1;
                let bc1 = 1.0 - beta1.powi(*t as i32);
                let bc2 = 1.0 - beta2.powi(*t as i32);
                let lr_t = T::from_f64(lr * lr_mult * bc2.sqrt() / bc1);
                let b1 = T::from_f64(beta1);
                let b2 = T::from_f64(beta2);
                let one_m_b1 = T::one() - b1;
                let one_m_b2 = T::one() - b2;
                let eps = T::from_f64(eps);
                let mut slot = 0usize;
                net.for_each_param(|param, grad| {
                    if m.len() == slot {
                        m.push(vec![T::zero(); param.len()]);
                        v.push(vec![T::zero(); param.len()]);
                    }
                    let (ms, vs) = (&mut m[slot], &mut v[slot]);
                    for (((p, &g), mi), vi) in
                        param.iter_mut().zip(grad).zip(ms.iter_mut()).zip(vs.iter_mut())
                    {
                        *mi = b1 * *mi + one_m_b1 * g;
                        *vi = b2 * *vi + one_m_b2 * g * g;
                        *p -= lr_t * *mi / (vi.sqrt() + eps);
                    }
                    slot += 1;
                });
            }
            _ => unreachable!("state matches kind by construction"),
        }
    }

    /// State buffers in parameter order (for checkpoints). Adam interleaves
    /// first and second moments: `m0, v0, m1, v1, ...`.
    pub fn state_tensors(&self) -> (u64, Vec<&[T]>) {
        match &self.state {
            OptState::Sgd { velocity } => (0, velocity.iter().map(|v| v.as_slice()).collect()),
            OptState::Adam { m, v, t } => {
                let mut out = Vec::with_capacity(2 * m.len());
                for (mi, vi) in m.iter().zip(v) {
                    out.push(mi.as_slice());
                    out.push(vi.as_slice());
                }
                (*t, out)
            }
        }
    }

    pub fn load_state(&mut self, step: u64, tensors: Vec<Vec<T>>) -> Result<()> {
        match &mut self.state {
            OptState::Sgd { velocity } => {
                *velocity = tensors;
            }
            OptState::Adam { m, v, t } => {
                if tensors.len() % 2 != 0 {
                    return Err(Error::IncompatibleCheckpoint(
                        "adam state needs an even tensor count".into(),
                    ));
                }
                m.clear();
                v.clear();
                for pair in tensors.chunks_exact(2) {
                    m.push(pair[0].clone());
                    v.push(pair[1].clone());
                }
                *t = step;
            }
        }
        Ok(())
    }
}

/// Loss and accuracy aggregated over one epoch of training batches.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochMetrics {
    pub avg_loss: f64,
    pub train_accuracy: f64,
}

/// Owns a network, an optimizer, and the epoch counter.
pub struct Trainer<T> {
    pub net: Network<T>,
    pub cfg: TrainConfig,
    pub optimizer: Optimizer<T>,
    /// Completed epochs.
    pub epoch: usize,
}

impl<T: Scalar> Trainer<T> {
    pub fn new(net: Network<T>, cfg: TrainConfig) -> Self {
        let optimizer = Optimizer::new(cfg.optimizer);
        Trainer { net, cfg, optimizer, epoch: 0 }
    }

    pub fn current_lr(&self) -> f64 {
        self.cfg.optimizer.base_lr() * self.cfg.schedule.multiplier(self.epoch, self.cfg.epochs)
    }

    /// One pass over the training data: shuffled batches, forward per layer
    /// mode, exact backward, parameter update. Aborts with diagnostics on a
    /// non-finite loss.
    pub fn train_epoch(&mut self, train: &Dataset<T>) -> Result<EpochMetrics> {
        if train.is_empty() {
            return Err(Error::DegenerateInput("empty training dataset".into()));
        }
        let lr_mult = self.cfg.schedule.multiplier(self.epoch, self.cfg.epochs);
        let mut loss_sum = 0.0f64;
        let mut correct = 0usize;
        let mut total = 0usize;
        let shuffle = Shuffle::Seeded { seed: self.cfg.seed, epoch: self.epoch as u64 };
        for (step, (x, y)) in train.batches(self.cfg.batch_size, shuffle).enumerate() {
            self.net.zero_grads();
            let logits = self.net.forward(&x, Phase::Train)?;
            let (loss, grad) = softmax_xent(&logits, &y)?;
            if !loss.is_finite() {
                return Err(Error::Diverged {
                    epoch: self.epoch,
                    step,
                    diagnostics: stats_diagnostics(&self.net),
                });
            }
            loss_sum += loss * y.len() as f64;
            correct += count_correct(&logits, &y);
            total += y.len();
            self.net.backward(&grad)?;
            self.optimizer.step(&mut self.net, lr_mult);
        }
        self.epoch += 1;
        Ok(EpochMetrics { avg_loss: loss_sum / total as f64, train_accuracy: correct as f64 / total as f64 })
    }
}

fn stats_diagnostics<T: Scalar>(net: &Network<T>) -> String {
    net.conv_stats()
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let mu_w_mean = if s.mu_w.is_empty() {
                0.0
            } else {
                s.mu_w.iter().map(|v| v.as_f64()).sum::<f64>() / s.mu_w.len() as f64
            };
            format!("conv{i}: mu_x_running={:.4e} mean(mu_w)={mu_w_mean:.4e}", s.mu_x_running.as_f64())
        })
        .collect::<Vec<_>>()
        .join("; ")
}

fn count_correct<T: Scalar>(logits: &Tensor<T>, labels: &[u8]) -> usize {
    let k = logits.shape()[1];
    labels
        .iter()
        .enumerate()
        .filter(|&(i, &label)| {
            let row = &logits.data()[i * k..(i + 1) * k];
            let mut best = 0usize;
            for (j, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = j;
                }
            }
            best == label as usize
        })
        .count()
}

/// Top-1 accuracy on a dataset, inference phase (dropout off, frozen
/// statistics, no input clipping).
pub fn evaluate<T: Scalar>(net: &mut Network<T>, ds: &Dataset<T>, batch_size: usize) -> Result<f64> {
    if ds.is_empty() {
        return Err(Error::DegenerateInput("empty evaluation dataset".into()));
    }
    let mut correct = 0usize;
    for (x, y) in ds.batches(batch_size, Shuffle::Off) {
        let logits = net.forward(&x, Phase::Infer)?;
        correct += count_correct(&logits, &y);
    }
    Ok(correct as f64 / ds.len() as f64)
}

/// One pass over the training data in calibration mode: running input means
/// advance exactly as in training, nothing else changes. Used after loading
/// parameters from a network that never tracked statistics.
pub fn calibrate<T: Scalar>(net: &mut Network<T>, ds: &Dataset<T>, batch_size: usize) -> Result<()> {
    if ds.is_empty() {
        return Err(Error::DegenerateInput("empty calibration dataset".into()));
    }
    for (x, _) in ds.batches(batch_size, Shuffle::Off) {
        net.forward(&x, Phase::Calibrate)?;
    }
    Ok(())
}

/// CSV header of the metrics log.
pub const METRICS_HEADER: &str = "epoch,split,loss,top1";

/// One metrics row; `loss` may be absent for evaluation-only rows.
pub fn metrics_row(epoch: usize, split: &str, loss: Option<f64>, top1: f64) -> String {
    match loss {
        Some(l) => format!("{epoch},{split},{l:.9e},{top1:.6}"),
        None => format!("{epoch},{split},,{top1:.6}"),
    }
}
