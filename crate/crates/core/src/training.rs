//! Multi-task imitation loss, Adam and the training loop.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, LabeledRef, TrainingSample};
use crate::geometry::Command;
use crate::error::{Error, Result};
use crate::model::{backward, BatchItem, ModelParameters, NetworkOutput};
use crate::sim::sensor::ChannelMode;
use crate::sim::Action;

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub total: f64,
    /// Squared steer error.
    pub steer: f64,
    /// Class-weighted throttle cross-entropy.
    pub throttle: f64,
}

fn log_softmax(logits: [f64; 2]) -> [f64; 2] {
    let m = logits[0].max(logits[1]);
    let lse = m + ((logits[0] - m).exp() + (logits[1] - m).exp()).ln();
    [logits[0] - lse, logits[1] - lse]
}

/// `(1 - lambda) * (steer - label)^2 + lambda * weight * CE(logits, label)`.
pub fn loss(out: &NetworkOutput, label: Action, lambda: f64, weight: f64) -> LossParts {
    let steer = (out.steer - label.steer).powi(2);
    let throttle = -weight * log_softmax(out.throttle_logits)[label.throttle as usize];
    LossParts {
        total: (1.0 - lambda) * steer + lambda * throttle,
        steer,
        throttle,
    }
}

/// Loss and its gradient w.r.t. the raw head outputs (pre-tanh steer, logits).
pub(crate) fn loss_and_grad(
    out: &NetworkOutput,
    raw_steer: f64,
    label: Action,
    lambda: f64,
    weight: f64,
) -> (LossParts, [f64; 3]) {
    let parts = loss(out, label, lambda, weight);
    let th = raw_steer.tanh();
    let d_steer = (1.0 - lambda) * 2.0 * (th - label.steer) * (1.0 - th * th);
    let ls = log_softmax(out.throttle_logits);
    let y = label.throttle as usize;
    let mut d = [0.0; 3];
    d[0] = d_steer;
    for c in 0..2 {
        let p = ls[c].exp();
        d[c + 1] = lambda * weight * (p - if c == y { 1.0 } else { 0.0 });
    }
    (parts, d)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lambda: f64,
    pub lr0: f64,
    /// Learning rate multiplier applied once per epoch.
    pub lr_decay: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lambda: 0.5,
            lr0: 0.001,
            lr_decay: 0.9,
            batch_size: 16,
            epochs: 10,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = (0.0..=1.0).contains(&self.lambda)
            && self.lr0 > 0.0
            && self.lr_decay > 0.0
            && self.lr_decay <= 1.0
            && self.batch_size >= 1
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid training config {self:?}")))
        }
    }

    /// Learning rate of zero-based epoch `e`.
    pub fn lr(&self, epoch: usize) -> f64 {
        self.lr0 * self.lr_decay.powi(epoch as i32)
    }
}

/// Adam with bias-corrected moment estimates.
#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, beta1: f64, beta2: f64, eps: f64) -> Self {
        Self {
            beta1,
            beta2,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, params: &mut [f64], grad: &[f64], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for i in 0..params.len() {
            let g = grad[i];
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g;
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g;
            let mh = self.m[i] / c1;
            let vh = self.v[i] / c2;
            params[i] -= lr * mh / (vh.sqrt() + self.eps);
        }
    }
}

/// Random-access training examples.
pub trait SampleSource {
    fn len(&self) -> usize;
    fn item(&self, i: usize) -> Result<BatchItem>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl SampleSource for [TrainingSample] {
    fn len(&self) -> usize {
        <[TrainingSample]>::len(self)
    }

    fn item(&self, i: usize) -> Result<BatchItem> {
        let s = &self[i];
        Ok(BatchItem {
            input: s.observation.to_input(),
            speed: s.speed,
            command: Command::new(s.command, s.route),
            label: s.label,
            weight: s.weight,
        })
    }
}

/// Balanced references into a recorded dataset, materialized per batch.
#[derive(Debug, Clone, Copy)]
pub struct RefSource<'a> {
    pub dataset: &'a Dataset,
    pub refs: &'a [LabeledRef],
    pub mode: ChannelMode,
    /// (stop, go) class weights.
    pub weights: (f64, f64),
}

impl SampleSource for RefSource<'_> {
    fn len(&self) -> usize {
        self.refs.len()
    }

    fn item(&self, i: usize) -> Result<BatchItem> {
        let r = self.refs[i].at;
        let rec = self.dataset.record(r)?;
        let mut input = Vec::new();
        self.dataset.write_input(r, self.mode, &mut input)?;
        Ok(BatchItem {
            input,
            speed: rec.pose.speed,
            command: Command::new(rec.views[r.view as usize].angle, rec.route),
            label: rec.action(r.view),
            weight: if rec.throttle {
                self.weights.1
            } else {
                self.weights.0
            },
        })
    }
}

/// Visiting order of epoch `epoch`; depends only on `(seed, epoch)`.
pub fn epoch_permutation(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub steer_loss: f64,
    pub throttle_loss: f64,
    pub total: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochStats>,
    pub wall_time_s: f64,
    pub checkpoints: Vec<PathBuf>,
    /// Epoch at which a non-finite loss stopped training.
    pub diverged_at: Option<usize>,
}

impl TrainReport {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,steer_loss,throttle_loss,total,lr\n");
        for e in &self.epochs {
            s.push_str(&format!(
                "{},{},{},{},{}\n",
                e.epoch, e.steer_loss, e.throttle_loss, e.total, e.lr
            ));
        }
        s
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let bad = |l: &str| Error::Format(format!("train report line `{l}`"));
        let mut epochs = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 5 {
                return Err(bad(line));
            }
            let num = |i: usize| f[i].parse::<f64>().map_err(|_| bad(line));
            epochs.push(EpochStats {
                epoch: f[0].parse().map_err(|_| bad(line))?,
                steer_loss: num(1)?,
                throttle_loss: num(2)?,
                total: num(3)?,
                lr: num(4)?,
            });
        }
        Ok(Self {
            epochs,
            ..Self::default()
        })
    }
}

pub fn checkpoint_path(dir: &Path, epoch: usize) -> PathBuf {
    dir.join(format!("epoch_{epoch:03}.ckpt"))
}

/// Minibatch Adam over `source`. Epoch losses are the means of the batch
/// losses seen during that epoch. When `checkpoint_dir` is given a checkpoint
/// is written after every epoch. A non-finite loss ends training early and is
/// recorded in the report; the returned parameters are those of the last
/// completed step.
pub fn train<S: SampleSource + ?Sized>(
    params: &ModelParameters,
    source: &S,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
    mut on_epoch: impl FnMut(&EpochStats),
) -> Result<(ModelParameters, TrainReport)> {
    cfg.validate()?;
    if source.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir)?;
    }
    let started = Instant::now();
    let mut model = params.clone();
    let mut adam = Adam::new(model.values.len(), cfg.beta1, cfg.beta2, cfg.eps);
    let mut report = TrainReport::default();
    'epochs: for epoch in 0..cfg.epochs {
        let lr = cfg.lr(epoch);
        let order = epoch_permutation(cfg.rng_seed, epoch, source.len());
        let mut sum = LossParts::default();
        let mut batches = 0usize;
        for chunk in order.chunks(cfg.batch_size) {
            let batch = chunk
                .iter()
                .map(|&i| source.item(i))
                .collect::<Result<Vec<_>>>()?;
            let g = match backward(&model, &batch, cfg.lambda) {
                Ok(g) if g.grad.iter().all(|v| v.is_finite()) => g,
                Ok(_) | Err(Error::NonFiniteLoss { .. }) => {
                    report.diverged_at = Some(epoch);
                    break 'epochs;
                }
                Err(e) => return Err(e),
            };
            adam.step(&mut model.values, &g.grad, lr);
            sum.total += g.loss.total;
            sum.steer += g.loss.steer;
            sum.throttle += g.loss.throttle;
            batches += 1;
        }
        let n = batches as f64;
        let stats = EpochStats {
            epoch,
            steer_loss: sum.steer / n,
            throttle_loss: sum.throttle / n,
            total: sum.total / n,
            lr,
        };
        on_epoch(&stats);
        report.epochs.push(stats);
        if let Some(dir) = checkpoint_dir {
            let p = checkpoint_path(dir, epoch);
            model.save(&p)?;
            report.checkpoints.push(p);
        }
    }
    report.wall_time_s = started.elapsed().as_secs_f64();
    Ok((model, report))
}
