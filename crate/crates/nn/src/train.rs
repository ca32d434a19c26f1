//! Training loop with reduce-on-plateau scheduling and early stopping.

use std::io::Write;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{row_nll, Graph, Scalar};
use crate::model::{Checkpoint, Model, ModelError, Outputs};
use crate::optim::{Adam, OptimError};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("{0} split is empty")]
    EmptySplit(&'static str),
    #[error("non-finite loss at epoch {epoch}, batch {batch}: {detail}")]
    NonFinite { epoch: usize, batch: usize, detail: String },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Optim(#[from] OptimError),
    #[error("training log: {0}")]
    Log(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub lr_floor: f64,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
    pub seed: u64,
    /// Ends training once an epoch's mean train loss drops below this.
    pub stop_at_train_loss: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-3,
            batch_size: 16,
            plateau_factor: 0.5,
            plateau_patience: 5,
            lr_floor: 1e-5,
            early_stop_patience: 10,
            max_epochs: 100,
            seed: 0,
            stop_at_train_loss: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: &str| Err(TrainError::Config(m.to_string()));
        if !(self.lr > 0.0) || !(self.lr_floor > 0.0) {
            return bad("lr and lr_floor must be positive");
        }
        if self.batch_size == 0 || self.max_epochs == 0 || self.plateau_patience == 0 {
            return bad("batch_size, max_epochs and plateau_patience must be positive");
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return bad("plateau_factor must lie in (0, 1)");
        }
        if self.early_stop_patience <= self.plateau_patience {
            return bad("early_stop_patience must exceed plateau_patience");
        }
        Ok(())
    }
}

/// Multiplies the learning rate by `factor` after more than `patience`
/// epochs without a new best validation loss.
#[derive(Debug, Clone)]
pub struct ReduceOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub floor: f64,
    best: f64,
    bad_epochs: usize,
}

impl ReduceOnPlateau {
    pub fn new(factor: f64, patience: usize, floor: f64) -> Self {
        ReduceOnPlateau { factor, patience, floor, best: f64::INFINITY, bad_epochs: 0 }
    }

    /// Returns true when the rate was lowered.
    pub fn step(&mut self, val_loss: f64, lr: &mut f64) -> bool {
        if val_loss < self.best {
            self.best = val_loss;
            self.bad_epochs = 0;
            return false;
        }
        self.bad_epochs += 1;
        if self.bad_epochs > self.patience {
            self.bad_epochs = 0;
            let next = (*lr * self.factor).max(self.floor);
            let reduced = next < *lr;
            *lr = next;
            return reduced;
        }
        false
    }
}

#[derive(Debug, Clone)]
pub struct EarlyStopping {
    pub patience: usize,
    best: f64,
    best_epoch: Option<usize>,
    bad_epochs: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct StopDecision {
    pub improved: bool,
    pub stop: bool,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        EarlyStopping { patience, best: f64::INFINITY, best_epoch: None, bad_epochs: 0 }
    }

    pub fn step(&mut self, epoch: usize, val_loss: f64) -> StopDecision {
        if val_loss < self.best {
            self.best = val_loss;
            self.best_epoch = Some(epoch);
            self.bad_epochs = 0;
            return StopDecision { improved: true, stop: false };
        }
        self.bad_epochs += 1;
        StopDecision { improved: false, stop: self.bad_epochs >= self.patience }
    }

    pub fn best_epoch(&self) -> Option<usize> {
        self.best_epoch
    }

    pub fn best(&self) -> f64 {
        self.best
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_loss: f64,
    pub pre_sep_loss: f64,
    pub post_sep_loss: f64,
    pub seconds: f64,
}

pub fn write_log_csv(w: impl Write, log: &[EpochLog]) -> Result<(), TrainError> {
    let err = |e: csv::Error| TrainError::Log(e.to_string());
    let mut out = csv::Writer::from_writer(w);
    out.write_record(["epoch", "lr", "train_loss", "val_loss", "pre_sep_loss", "post_sep_loss", "seconds"])
        .map_err(err)?;
    for e in log {
        out.write_record([
            e.epoch.to_string(),
            format!("{:e}", e.lr),
            format!("{:.6}", e.train_loss),
            format!("{:.6}", e.val_loss),
            format!("{:.6}", e.pre_sep_loss),
            format!("{:.6}", e.post_sep_loss),
            format!("{:.3}", e.seconds),
        ])
        .map_err(err)?;
    }
    out.flush().map_err(|e| TrainError::Log(e.to_string()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    MaxEpochs,
    EarlyStopping,
    TargetLoss,
}

pub struct TrainOutcome<T: Scalar> {
    pub best: Checkpoint,
    pub model: Model<T>,
    pub log: Vec<EpochLog>,
    pub stop_reason: StopReason,
}

/// Special ids the loss needs to know about.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SpecialIds {
    pub pad: u32,
    pub sep: u32,
}

/// Next-token inputs and targets for a batch, right-padded with PAD.
pub fn batch_io(seqs: &[&[u32]], pad: u32) -> (Vec<Vec<u32>>, Vec<Option<usize>>) {
    let l = seqs.iter().map(|s| s.len().saturating_sub(1)).max().unwrap_or(0).max(1);
    let mut inputs = Vec::with_capacity(seqs.len());
    let mut targets = Vec::with_capacity(seqs.len() * l);
    for s in seqs {
        let mut row = vec![pad; l];
        for t in 0..l {
            if t + 1 < s.len() {
                row[t] = s[t];
                targets.push((s[t + 1] != pad).then_some(s[t + 1] as usize));
            } else {
                targets.push(None);
            }
        }
        inputs.push(row);
    }
    (inputs, targets)
}

#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct EvalLoss {
    pub loss: f64,
    pub pre_sep: f64,
    pub post_sep: f64,
}

/// Token-weighted mean loss over `seqs`, split at each sequence's first SEP
/// (targets up to and including SEP count as pre-SEP).
pub fn evaluate<T: Scalar>(
    model: &Model<T>,
    seqs: &[Vec<u32>],
    batch_size: usize,
    special: SpecialIds,
) -> Result<EvalLoss, ModelError> {
    let (mut all, mut pre, mut post) = ((0.0, 0usize), (0.0, 0usize), (0.0, 0usize));
    for chunk in seqs.chunks(batch_size.max(1)) {
        let refs: Vec<&[u32]> = chunk.iter().map(Vec::as_slice).collect();
        let (inputs, targets) = batch_io(&refs, special.pad);
        let l = inputs[0].len();
        let logits = model.logits(&inputs)?;
        let nll = row_nll(&logits, &targets);
        for (b, s) in refs.iter().enumerate() {
            let sep = s.iter().position(|&id| id == special.sep).unwrap_or(usize::MAX);
            for t in 0..l {
                let Some(v) = nll[b * l + t] else { continue };
                all.0 += v;
                all.1 += 1;
                let seg = if t + 1 <= sep { &mut pre } else { &mut post };
                seg.0 += v;
                seg.1 += 1;
            }
        }
    }
    let mean = |(s, n): (f64, usize)| if n == 0 { f64::NAN } else { s / n as f64 };
    Ok(EvalLoss { loss: mean(all), pre_sep: mean(pre), post_sep: mean(post) })
}

/// Trains `model` on assembled pair sequences and returns the best-validation
/// checkpoint along with the final model and per-epoch log.
pub fn train<T: Scalar>(
    mut model: Model<T>,
    train_set: &[Vec<u32>],
    val_set: &[Vec<u32>],
    cfg: &TrainConfig,
    special: SpecialIds,
    vocab_hash: &str,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome<T>, TrainError> {
    cfg.validate()?;
    if train_set.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if val_set.is_empty() {
        return Err(TrainError::EmptySplit("val"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(model.params().iter().map(|(_, t)| t));
    let mut lr = cfg.lr;
    let mut plateau = ReduceOnPlateau::new(cfg.plateau_factor, cfg.plateau_patience, cfg.lr_floor);
    let mut stopper = EarlyStopping::new(cfg.early_stop_patience);
    let mut best = Checkpoint::from_model(&model, vocab_hash, 0, f64::INFINITY);
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut stop_reason = StopReason::MaxEpochs;

    for epoch in 1..=cfg.max_epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let (mut loss_sum, mut tokens) = (0.0, 0usize);
        for (bi, idx) in order.chunks(cfg.batch_size).enumerate() {
            let refs: Vec<&[u32]> = idx.iter().map(|&i| train_set[i].as_slice()).collect();
            let (inputs, targets) = batch_io(&refs, special.pad);
            let count = targets.iter().filter(|t| t.is_some()).count();
            if count == 0 {
                continue;
            }
            let mut g = Graph::new(true);
            let (logits, params) = model.forward(&mut g, &inputs, Outputs::All, Some(&mut rng))?;
            let loss = g.cross_entropy(logits, &targets).map_err(|e| TrainError::NonFinite {
                epoch,
                batch: bi,
                detail: e.to_string(),
            })?;
            let value = g.value(loss).item().to_f64().unwrap_or(f64::NAN);
            if !value.is_finite() {
                return Err(TrainError::NonFinite { epoch, batch: bi, detail: format!("loss {value}") });
            }
            g.backward(loss).map_err(ModelError::from)?;
            let grads: Vec<&[T]> = params.iter().map(|&p| g.grad(p)).collect::<Result<_, _>>().map_err(ModelError::from)?;
            adam.step(model.params_mut(), &grads, lr)?;
            loss_sum += value * count as f64;
            tokens += count;
        }
        let train_loss = loss_sum / tokens.max(1) as f64;
        let eval = evaluate(&model, val_set, cfg.batch_size, special)?;
        if !eval.loss.is_finite() {
            return Err(TrainError::NonFinite { epoch, batch: 0, detail: format!("validation loss {}", eval.loss) });
        }
        let entry = EpochLog {
            epoch,
            lr,
            train_loss,
            val_loss: eval.loss,
            pre_sep_loss: eval.pre_sep,
            post_sep_loss: eval.post_sep,
            seconds: started.elapsed().as_secs_f64(),
        };
        on_epoch(&entry);
        log.push(entry);

        let decision = stopper.step(epoch, eval.loss);
        if decision.improved {
            best = Checkpoint::from_model(&model, vocab_hash, epoch, eval.loss);
        }
        if cfg.stop_at_train_loss.is_some_and(|target| train_loss < target) {
            stop_reason = StopReason::TargetLoss;
            break;
        }
        if decision.stop {
            stop_reason = StopReason::EarlyStopping;
            break;
        }
        plateau.step(eval.loss, &mut lr);
    }
    Ok(TrainOutcome { best, model, log, stop_reason })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn early_stopping_keeps_best_epoch() {
        let mut es = EarlyStopping::new(10);
        let losses = [3.0, 2.0, 2.5, 2.0, 2.1, 2.2, 3.0, 2.0, 2.4, 2.3, 2.0, 2.9];
        let mut stopped_at = None;
        for (i, &v) in losses.iter().enumerate() {
            if es.step(i + 1, v).stop {
                stopped_at = Some(i + 1);
                break;
            }
        }
        assert_eq!(stopped_at, Some(12));
        assert_eq!(es.best_epoch(), Some(2));
    }

    #[test]
    fn plateau_halves_once_after_six_flat_epochs() {
        let mut s = ReduceOnPlateau::new(0.5, 5, 1e-5);
        let mut lr = 1e-3;
        assert!(!s.step(1.0, &mut lr));
        let halvings = (0..6).filter(|_| s.step(1.0, &mut lr)).count();
        assert_eq!(halvings, 1);
        assert_eq!(lr, 5e-4);
        let mut lr = 1.5e-5;
        let mut s = ReduceOnPlateau::new(0.5, 1, 1e-5);
        s.step(1.0, &mut lr);
        s.step(1.0, &mut lr);
        s.step(1.0, &mut lr);
        assert_eq!(lr, 1e-5);
    }

    #[test]
    fn batch_targets_skip_padding() {
        let (inputs, targets) = batch_io(&[&[1, 5, 6, 2], &[1, 7]], 0);
        assert_eq!(inputs, vec![vec![1, 5, 6], vec![1, 0, 0]]);
        assert_eq!(targets, vec![Some(5), Some(6), Some(2), Some(7), None, None]);
    }

    #[test]
    fn config_validation() {
        TrainConfig::default().validate().unwrap();
        let cfg = TrainConfig { early_stop_patience: 5, ..TrainConfig::default() };
        assert!(cfg.validate().is_err());
    }
}
