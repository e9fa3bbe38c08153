//! Minibatch training with plateau-halved learning rate and best-weights
//! checkpointing. One tape serves a whole minibatch: parameters are bound
//! once, per-window losses are averaged, and a single reverse pass yields
//! the accumulated gradient.

use std::path::Path;

use super::{window_loss, PinodeWeights, TrainingWindow};
use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::optim::{clip_gradients, Adam};
use crate::rng;
use rand::seq::SliceRandom;

#[derive(Debug, Clone)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Windows sampled per epoch from the training split.
    pub windows_per_epoch: usize,
    pub val_fraction: f64,
    /// Cap on validation windows so epoch cost stays bounded.
    pub max_val_windows: usize,
    pub lr: f64,
    pub clip_norm: f64,
    /// Epochs without validation improvement before the rate is halved.
    pub plateau_patience: usize,
    pub lr_decay: f64,
    pub min_lr: f64,
    pub w_phys: f64,
    pub w_cons: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            batch_size: 32,
            windows_per_epoch: 256,
            val_fraction: 0.2,
            max_val_windows: 128,
            lr: 1e-3,
            clip_norm: 1.0,
            plateau_patience: 25,
            lr_decay: 0.5,
            min_lr: 1e-6,
            w_phys: 0.5,
            w_cons: 0.5,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, serde::Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_total: f64,
    pub train_data: f64,
    pub train_phys: f64,
    pub train_cons: f64,
    pub val_total: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochRecord>,
    pub best_val: Option<f64>,
    pub best_epoch: Option<usize>,
}

fn mean_window_loss(
    weights: &PinodeWeights,
    tape: &mut Tape,
    windows: &[&TrainingWindow],
    cfg: &TrainConfig,
) -> Result<f64> {
    let mut total = 0.0;
    for win in windows {
        tape.reset();
        let bound = weights.bind(tape);
        let fwd = bound.forward_window(tape, win, None)?;
        let loss = window_loss(tape, &fwd, win, cfg.w_phys, cfg.w_cons)?;
        total += tape.value(loss.total).scalar_value();
    }
    Ok(total / windows.len() as f64)
}

pub fn train(
    weights: &mut PinodeWeights,
    windows: &[TrainingWindow],
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    if windows.is_empty() {
        return Err(Error::Training("no training windows".into()));
    }
    let mut split_rng = rng::seeded(cfg.seed);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    order.shuffle(&mut split_rng);
    let n_val = ((windows.len() as f64 * cfg.val_fraction) as usize)
        .min(cfg.max_val_windows)
        .min(windows.len().saturating_sub(1));
    let (val_idx, train_idx) = order.split_at(n_val);
    let val_set: Vec<&TrainingWindow> = if val_idx.is_empty() {
        train_idx.iter().map(|&i| &windows[i]).collect()
    } else {
        val_idx.iter().map(|&i| &windows[i]).collect()
    };

    let mut adam = Adam::new(&weights.params(), cfg.lr);
    let mut tape = Tape::new();
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best_val = f64::INFINITY;
    let mut best_epoch = None;
    let mut best_weights: Option<PinodeWeights> = None;
    let mut stall = 0usize;
    let mut lr = cfg.lr;

    for epoch in 0..cfg.epochs {
        let mut epoch_rng = rng::seeded(cfg.seed ^ (0x9e37_79b9 + epoch as u64));
        let mut pool: Vec<usize> = train_idx.to_vec();
        pool.shuffle(&mut epoch_rng);
        pool.truncate(cfg.windows_per_epoch.max(cfg.batch_size).min(pool.len()));

        let mut sums = [0.0f64; 4];
        let mut seen = 0usize;
        for chunk in pool.chunks(cfg.batch_size) {
            tape.reset();
            let bound = weights.bind(&mut tape);
            let mut batch_total = None;
            for &wi in chunk {
                let win = &windows[wi];
                let fwd = bound.forward_window(&mut tape, win, Some(&mut epoch_rng))?;
                let loss = window_loss(&mut tape, &fwd, win, cfg.w_phys, cfg.w_cons)?;
                sums[0] += tape.value(loss.total).scalar_value();
                sums[1] += tape.value(loss.data).scalar_value();
                sums[2] += tape.value(loss.phys).scalar_value();
                sums[3] += tape.value(loss.cons).scalar_value();
                seen += 1;
                batch_total = Some(match batch_total {
                    None => loss.total,
                    Some(acc) => tape.add(acc, loss.total)?,
                });
            }
            let root = tape.scale(batch_total.unwrap(), 1.0 / chunk.len() as f64)?;
            let grads = tape.backward(root)?;
            let mut gvec: Vec<Tensor> =
                bound.param_ids().iter().map(|&id| grads.get(id)).collect();
            clip_gradients(&mut gvec, cfg.clip_norm);
            let mut pm = weights.params_mut();
            adam.step(&mut pm, &gvec)?;
        }

        let val_total = mean_window_loss(weights, &mut tape, &val_set, cfg)?;
        history.push(EpochRecord {
            epoch,
            lr,
            train_total: sums[0] / seen as f64,
            train_data: sums[1] / seen as f64,
            train_phys: sums[2] / seen as f64,
            train_cons: sums[3] / seen as f64,
            val_total,
        });

        if val_total < best_val {
            best_val = val_total;
            best_epoch = Some(epoch);
            best_weights = Some(weights.clone());
            stall = 0;
        } else {
            stall += 1;
            if stall >= cfg.plateau_patience {
                lr = (lr * cfg.lr_decay).max(cfg.min_lr);
                adam.lr = lr;
                stall = 0;
            }
        }
    }

    if let Some(best) = best_weights {
        *weights = best;
    }
    Ok(TrainOutcome {
        history,
        best_val: best_epoch.map(|_| best_val),
        best_epoch,
    })
}

pub fn save_history(path: &Path, history: &[EpochRecord]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record([
        "epoch", "lr", "train_total", "train_data", "train_phys", "train_cons", "val_total",
    ])?;
    for r in history {
        w.write_record([
            r.epoch.to_string(),
            format!("{:.6e}", r.lr),
            format!("{:.8e}", r.train_total),
            format!("{:.8e}", r.train_data),
            format!("{:.8e}", r.train_phys),
            format!("{:.8e}", r.train_cons),
            format!("{:.8e}", r.val_total),
        ])?;
    }
    w.flush()?;
    Ok(())
}
