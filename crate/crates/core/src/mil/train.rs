//! AdamW training with linear warm-up + cosine decay and early stopping on
//! validation RMSE. Fully deterministic per seed: batch order, dropout
//! masks, and initialization all derive from the config seed.

use std::io::{Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bags::Bag;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, rng_from};

use super::{accumulate, backward, forward, loss, ForwardMode, MilParams, GROUPS};

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr0: f64,
    pub weight_decay: f64,
    pub max_epochs: usize,
    pub patience: usize,
    pub warmup_epochs: usize,
    pub batch_bags: usize,
    pub dropout: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 5e-4,
            weight_decay: 1e-4,
            max_epochs: 150,
            patience: 15,
            warmup_epochs: 10,
            batch_bags: 8,
            dropout: 0.15,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lr0 <= 0.0 || self.weight_decay < 0.0 {
            return Err(Error::invalid(
                "lr0 must be positive, weight_decay nonnegative",
            ));
        }
        if self.max_epochs == 0 || self.batch_bags == 0 {
            return Err(Error::invalid("max_epochs and batch_bags must be positive"));
        }
        if self.patience >= self.max_epochs {
            return Err(Error::invalid("patience must be below max_epochs"));
        }
        if self.warmup_epochs == 0 || self.warmup_epochs >= self.max_epochs {
            return Err(Error::invalid("warmup_epochs must be in (0, max_epochs)"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid("dropout must be in [0,1)"));
        }
        Ok(())
    }
}

/// Learning rate at an epoch: linear warm-up to lr0 over the first
/// `warmup_epochs`, then cosine decay to ~0 at `max_epochs`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> f64 {
    if epoch < cfg.warmup_epochs {
        cfg.lr0 * (epoch + 1) as f64 / cfg.warmup_epochs as f64
    } else {
        let span = (cfg.max_epochs - cfg.warmup_epochs) as f64;
        let progress = (epoch - cfg.warmup_epochs) as f64 / span;
        cfg.lr0 * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Snapshot at the minimum validation RMSE.
    pub params: MilParams,
    pub history: Vec<EpochStats>,
    pub best_epoch: usize,
    pub best_val_rmse: f64,
}

/// Prediction with dropout off.
pub fn predict(bag: &Bag, params: &MilParams) -> Result<f64> {
    Ok(forward(bag, params, ForwardMode::Eval)?.prediction)
}

/// Root mean squared error over a bag set, dropout off.
pub fn val_rmse(bags: &[Bag], params: &MilParams) -> Result<f64> {
    if bags.is_empty() {
        return Err(Error::invalid("empty evaluation set"));
    }
    let mut sum = 0.0;
    for bag in bags {
        let pred = predict(bag, params)?;
        sum += (pred - bag.target).powi(2);
    }
    Ok((sum / bags.len() as f64).sqrt())
}

fn l2(xs: &[f64]) -> f64 {
    xs.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// AdamW with decoupled weight decay: decay is applied to the pre-step
/// parameters of every group, then the bias-corrected Adam step follows.
fn adamw_step(
    flat: &mut [f64],
    grads: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    t: usize,
    lr: f64,
    weight_decay: f64,
) {
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for i in 0..flat.len() {
        let g = grads[i];
        flat[i] -= lr * weight_decay * flat[i];
        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g;
        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        flat[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
    }
}

/// Trains on shuffled batches, evaluates validation RMSE after each epoch
/// (dropout off), keeps the best snapshot, and stops after `patience`
/// epochs without improvement. A non-finite batch loss aborts with
/// diagnostics rather than being skipped.
pub fn train(train_bags: &[Bag], val_bags: &[Bag], cfg: &TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    if train_bags.is_empty() || val_bags.is_empty() {
        return Err(Error::invalid("train and validation sets must be nonempty"));
    }

    let mut flat = MilParams::init(cfg.seed).to_flat();
    let mut m = vec![0.0; flat.len()];
    let mut v = vec![0.0; flat.len()];
    let mut step = 0usize;

    let mut history = Vec::new();
    let mut best_rmse = f64::INFINITY;
    let mut best_epoch = 0usize;
    let mut best_flat = flat.clone();

    for epoch in 0..cfg.max_epochs {
        let lr = lr_at(epoch, cfg);
        let mut order: Vec<usize> = (0..train_bags.len()).collect();
        order.shuffle(&mut rng_from(derive_seed(
            cfg.seed,
            &["shuffle", &epoch.to_string()],
        )));

        let mut epoch_loss_sum = 0.0;
        for (batch_idx, batch) in order.chunks(cfg.batch_bags).enumerate() {
            let params = MilParams::from_flat(&flat)?;
            let mut grads = MilParams::zeros();
            let mut batch_loss = 0.0;
            for (slot, &bag_idx) in batch.iter().enumerate() {
                let bag = &train_bags[bag_idx];
                let dropout_seed = derive_seed(
                    cfg.seed,
                    &[
                        "dropout",
                        &epoch.to_string(),
                        &batch_idx.to_string(),
                        &slot.to_string(),
                    ],
                );
                let trace = forward(
                    bag,
                    &params,
                    ForwardMode::Train {
                        dropout_seed,
                        dropout_p: cfg.dropout,
                    },
                )?;
                batch_loss += loss(trace.prediction, bag.target);
                let upstream = 2.0 * (trace.prediction - bag.target) / batch.len() as f64;
                let g = backward(&trace, &params, upstream)?;
                accumulate(&mut grads, &g);
            }
            batch_loss /= batch.len() as f64;
            let g_flat = grads.to_flat();
            if !batch_loss.is_finite() {
                return Err(Error::NonFinite {
                    epoch,
                    batch: batch_idx,
                    param_norm: l2(&flat),
                    grad_norm: l2(&g_flat),
                });
            }
            epoch_loss_sum += batch_loss * batch.len() as f64;
            step += 1;
            adamw_step(
                &mut flat,
                &g_flat,
                &mut m,
                &mut v,
                step,
                lr,
                cfg.weight_decay,
            );
        }

        let params = MilParams::from_flat(&flat)?;
        let rmse = val_rmse(val_bags, &params)?;
        history.push(EpochStats {
            epoch,
            lr,
            train_loss: epoch_loss_sum / train_bags.len() as f64,
            val_rmse: rmse,
        });

        if rmse < best_rmse {
            best_rmse = rmse;
            best_epoch = epoch;
            best_flat = flat.clone();
        } else if epoch - best_epoch >= cfg.patience {
            break;
        }
    }

    Ok(TrainOutcome {
        params: MilParams::from_flat(&best_flat)?,
        history,
        best_epoch,
        best_val_rmse: best_rmse,
    })
}

// ── Checkpoint and history files ───────────────────────────────────────────

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    shapes: Vec<(String, usize)>,
    seed: u64,
    epoch: usize,
    val_rmse: f64,
}

/// Checkpoint layout: u32 LE header length, JSON header
/// {shapes, seed, epoch, val_rmse}, then the flat f64 LE parameter blob.
pub fn save_checkpoint(
    path: &Path,
    params: &MilParams,
    seed: u64,
    epoch: usize,
    val_rmse: f64,
) -> Result<()> {
    let header = serde_json::to_vec(&CheckpointHeader {
        shapes: GROUPS.iter().map(|(n, l)| (n.to_string(), *l)).collect(),
        seed,
        epoch,
        val_rmse,
    })?;
    let mut file = std::fs::File::create(path)?;
    file.write_all(&(header.len() as u32).to_le_bytes())?;
    file.write_all(&header)?;
    for v in params.to_flat() {
        file.write_all(&v.to_le_bytes())?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<(MilParams, u64, usize, f64)> {
    let mut file = std::fs::File::open(path)?;
    let mut len_bytes = [0u8; 4];
    file.read_exact(&mut len_bytes).map_err(|e| Error::Format {
        msg: format!("checkpoint header length: {e}"),
        offset: 0,
    })?;
    let header_len = u32::from_le_bytes(len_bytes) as usize;
    let mut header_bytes = vec![0u8; header_len];
    file.read_exact(&mut header_bytes)
        .map_err(|e| Error::Format {
            msg: format!("checkpoint header: {e}"),
            offset: 4,
        })?;
    let header: CheckpointHeader =
        serde_json::from_slice(&header_bytes).map_err(|e| Error::Format {
            msg: format!("checkpoint header json: {e}"),
            offset: 4,
        })?;
    let expected: Vec<(String, usize)> = GROUPS.iter().map(|(n, l)| (n.to_string(), *l)).collect();
    if header.shapes != expected {
        return Err(Error::Format {
            msg: "checkpoint shapes do not match this build".into(),
            offset: 4,
        });
    }
    let total: usize = GROUPS.iter().map(|(_, l)| l).sum();
    let mut blob = vec![0u8; total * 8];
    file.read_exact(&mut blob).map_err(|e| Error::Format {
        msg: format!("checkpoint blob: {e}"),
        offset: (4 + header_len) as u64,
    })?;
    let flat: Vec<f64> = blob
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok((
        MilParams::from_flat(&flat)?,
        header.seed,
        header.epoch,
        header.val_rmse,
    ))
}

/// Training history CSV: `epoch,lr,train_loss,val_rmse`.
pub fn write_history_csv(path: &Path, history: &[EpochStats]) -> Result<()> {
    let mut out = String::from("epoch,lr,train_loss,val_rmse\n");
    for s in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            s.epoch, s.lr, s.train_loss, s.val_rmse
        ));
    }
    std::fs::write(path, out)?;
    Ok(())
}
