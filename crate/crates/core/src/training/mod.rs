//! Optimization loop: warmup/inverse-square-root learning rate, LAMB
//! updates over length-bucketed, padded batches.

mod lamb;

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

pub use lamb::{lamb_step, trust_ratio, LambConfig, OptimizerState};

use crate::error::{Error, Result};
use crate::model::{FastPitch, LossBreakdown, Padding, TrainExample};
use crate::numerics::Mode;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr_scale: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub warmup_steps: u64,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub max_steps: u64,
    pub seed: u64,
    /// Save a checkpoint every this many steps (0 = only at the end).
    pub checkpoint_every: u64,
    /// Global gradient-norm clip; off unless set.
    pub grad_clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr_scale: 0.1,
            beta1: 0.9,
            beta2: 0.98,
            eps: 1e-9,
            warmup_steps: 1000,
            weight_decay: 1e-6,
            batch_size: 16,
            max_steps: 1000,
            seed: 0,
            checkpoint_every: 0,
            grad_clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn lamb(&self) -> LambConfig {
        LambConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
            layerwise: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.lamb().validate()?;
        if self.warmup_steps == 0 {
            return Err(Error::Config("warmup_steps must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be positive".into()));
        }
        if !(self.lr_scale > 0.0) {
            return Err(Error::Config("lr_scale must be positive".into()));
        }
        if matches!(self.grad_clip_norm, Some(c) if !(c > 0.0)) {
            return Err(Error::Config("grad_clip_norm must be positive".into()));
        }
        Ok(())
    }
}

/// `lr_scale · d_model^−½ · min(step^−½, step · warmup^−3/2)`.
pub fn lr_at(step: u64, cfg: &TrainConfig, d_model: usize) -> Result<f64> {
    if step == 0 {
        return Err(Error::OutOfRange("learning-rate steps start at 1".into()));
    }
    if cfg.warmup_steps == 0 {
        return Err(Error::Config("warmup_steps must be at least 1".into()));
    }
    let s = step as f64;
    let warmup = cfg.warmup_steps as f64;
    Ok(cfg.lr_scale * (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * warmup.powf(-1.5)))
}

/// One row of the loss trace; losses are batch means of per-utterance
/// losses.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: u64,
    pub lr: f64,
    pub mel_loss: f64,
    pub pitch_loss: f64,
    pub dur_loss: f64,
    pub total: f64,
}

pub fn write_trace_csv(path: &Path, rows: &[TraceRow]) -> Result<()> {
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = std::io::BufWriter::new(file);
    let mut emit = || -> std::io::Result<()> {
        writeln!(w, "step,lr,mel_loss,pitch_loss,dur_loss,total")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{}",
                r.step, r.lr, r.mel_loss, r.pitch_loss, r.dur_loss, r.total
            )?;
        }
        w.flush()
    };
    emit().map_err(|e| Error::io(path, e))
}

pub fn read_trace_csv(path: &Path) -> Result<Vec<TraceRow>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let bad = |line: usize| Error::Format {
        path: path.to_path_buf(),
        msg: format!("malformed trace row at line {}", line + 1),
    };
    text.lines()
        .enumerate()
        .skip(1)
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, line)| {
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 6 {
                return Err(bad(i));
            }
            let num = |k: usize| f[k].parse::<f64>().map_err(|_| bad(i));
            Ok(TraceRow {
                step: f[0].parse().map_err(|_| bad(i))?,
                lr: num(1)?,
                mel_loss: num(2)?,
                pitch_loss: num(3)?,
                dur_loss: num(4)?,
                total: num(5)?,
            })
        })
        .collect()
}

/// Batches of example indices for one pass over the data: a seeded shuffle,
/// a stable sort by frame count (so equal lengths stay shuffled), chunking,
/// then a shuffle of the batch order.
pub fn bucket_batches(lengths: &[usize], batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..lengths.len()).collect();
    order.shuffle(rng);
    order.sort_by_key(|&i| lengths[i]);
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect();
    batches.shuffle(rng);
    batches
}

fn mix_seed(seed: u64, step: u64, item: usize) -> u64 {
    // SplitMix64 finalizer over the combined inputs.
    let mut z = seed ^ step.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (item as u64).wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Per-utterance loss and gradients for a batch padded to common lengths.
/// The batch loss is the mean of the per-utterance losses.
pub fn batch_gradients(
    model: &FastPitch,
    batch: &[&TrainExample],
    mode_seed: Option<(u64, u64)>,
) -> Result<(LossBreakdown, Vec<Vec<f64>>)> {
    if batch.is_empty() {
        return Err(Error::Empty("empty batch".into()));
    }
    let padding = Padding {
        symbols: batch.iter().map(|e| e.symbols()).max().unwrap_or(0),
        frames: batch.iter().map(|e| e.frames()).max().unwrap_or(0),
    };
    let per_item: Vec<Result<(LossBreakdown, Vec<Vec<f64>>)>> = batch
        .par_iter()
        .enumerate()
        .map(|(i, ex)| {
            let mode = match mode_seed {
                Some((seed, step)) => Mode::Train {
                    seed: mix_seed(seed, step, i),
                },
                None => Mode::Eval,
            };
            let mut g = model.graph(mode);
            let (vars, losses) = model.forward_train(&mut g, ex, Some(padding))?;
            let mut grads = g.tape.backward(vars.total)?;
            Ok((losses, model.params().collect_grads(&g, &mut grads)))
        })
        .collect();

    let scale = 1.0 / batch.len() as f64;
    let mut mean = LossBreakdown::default();
    let mut total_grads: Vec<Vec<f64>> = model.params().tensors().iter().map(|t| vec![0.0; t.numel()]).collect();
    for item in per_item {
        let (losses, grads) = item?;
        mean.mel += losses.mel * scale;
        mean.pitch += losses.pitch * scale;
        mean.duration += losses.duration * scale;
        mean.total += losses.total * scale;
        for (acc, g) in total_grads.iter_mut().zip(grads) {
            for (a, v) in acc.iter_mut().zip(g) {
                *a += v * scale;
            }
        }
    }
    Ok((mean, total_grads))
}

fn clip_gradients(grads: &mut [Vec<f64>], max_norm: f64) {
    let norm = grads.iter().flatten().map(|g| g * g).sum::<f64>().sqrt();
    if norm > max_norm {
        let s = max_norm / norm;
        grads.iter_mut().flatten().for_each(|g| *g *= s);
    }
}

/// Model plus optimizer state; steps continue from `optimizer.step` when
/// resuming.
pub struct Trainer {
    pub model: FastPitch,
    pub optimizer: OptimizerState,
    pub config: TrainConfig,
}

impl Trainer {
    pub fn new(model: FastPitch, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params().tensors());
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn resume(model: FastPitch, optimizer: OptimizerState, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let fresh = OptimizerState::new(model.params().tensors());
        let shapes_match = fresh.first_moment.len() == optimizer.first_moment.len()
            && fresh
                .first_moment
                .iter()
                .zip(&optimizer.first_moment)
                .all(|(a, b)| a.len() == b.len());
        if !shapes_match {
            return Err(Error::Config(
                "optimizer state does not match the model parameters".into(),
            ));
        }
        Ok(Self {
            model,
            optimizer,
            config,
        })
    }

    pub fn step(&self) -> u64 {
        self.optimizer.step
    }

    /// One update on `batch`.
    pub fn train_step(&mut self, batch: &[&TrainExample]) -> Result<TraceRow> {
        let step = self.optimizer.step + 1;
        let lr = lr_at(step, &self.config, self.model.config().d_model)?;
        let (losses, mut grads) = batch_gradients(&self.model, batch, Some((self.config.seed, step)))?;
        if let Some(max_norm) = self.config.grad_clip_norm {
            clip_gradients(&mut grads, max_norm);
        }
        let lamb = self.config.lamb();
        let store = self.model.params_mut();
        let names: Vec<String> = store.iter().map(|(n, _)| n.to_string()).collect();
        let names: Vec<&str> = names.iter().map(String::as_str).collect();
        lamb_step(store.tensors_mut(), &grads, &names, &mut self.optimizer, &lamb, lr)?;
        Ok(TraceRow {
            step,
            lr,
            mel_loss: losses.mel,
            pitch_loss: losses.pitch,
            dur_loss: losses.duration,
            total: losses.total,
        })
    }

    /// Runs `config.max_steps` updates, cycling through length-bucketed
    /// batches. `on_step` sees every trace row after its update is applied.
    pub fn run<F>(&mut self, data: &[TrainExample], mut on_step: F) -> Result<Vec<TraceRow>>
    where
        F: FnMut(&TraceRow, &Trainer) -> Result<()>,
    {
        if self.config.max_steps == 0 {
            return Ok(Vec::new());
        }
        if data.is_empty() {
            return Err(Error::Empty("training set is empty".into()));
        }
        for ex in data {
            ex.validate(self.model.config())?;
        }
        let lengths: Vec<usize> = data.iter().map(TrainExample::frames).collect();
        let n_batches = data.len().div_ceil(self.config.batch_size) as u64;
        // Batch order is a function of (seed, epoch) only, so a resumed run
        // sees the same batches as an uninterrupted one.
        let mut epoch_batches: Option<(u64, Vec<Vec<usize>>)> = None;
        let mut trace = Vec::with_capacity(self.config.max_steps as usize);
        for _ in 0..self.config.max_steps {
            let done = self.optimizer.step;
            let epoch = done / n_batches;
            if epoch_batches.as_ref().map(|(e, _)| *e) != Some(epoch) {
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(self.config.seed, epoch, usize::MAX));
                epoch_batches = Some((epoch, bucket_batches(&lengths, self.config.batch_size, &mut rng)));
            }
            let (_, batches) = epoch_batches.as_ref().expect("filled above");
            let batch: Vec<&TrainExample> = batches[(done % n_batches) as usize].iter().map(|&i| &data[i]).collect();
            let row = self.train_step(&batch)?;
            on_step(&row, self)?;
            trace.push(row);
        }
        Ok(trace)
    }
}
