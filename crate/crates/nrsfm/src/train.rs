//! Optimization loop: Adam updates, mini-batching over frames,
//! checkpointing, and coherence-guided model selection.
//!
//! Frames are sampled without replacement per epoch and reshuffled each
//! epoch from a per-epoch stream of the master seed. Gradient accumulation
//! is an ordered reduction, so results do not depend on the worker count;
//! `deterministic` additionally zeroes the wall-time column of the training
//! log so reruns are byte-identical.

use crate::data::TrackSet;
use crate::error::{Error, Result};
use crate::network::{
    backward, forward, init_params, Gradients, LayerSizes, ModelParams,
};
use crate::sparse::{mutual_coherence, Dictionary};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

#[derive(Clone, Debug)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub checkpoint_every: usize,
    pub deterministic: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 1000,
            batch_size: 64,
            learning_rate: 1e-3,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            checkpoint_every: 100,
            deterministic: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size < 1 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(self.adam_beta1 > 0.0 && self.adam_beta1 < 1.0) {
            return Err(Error::Config("beta1 must be in (0, 1)".into()));
        }
        if !(self.adam_beta2 > 0.0 && self.adam_beta2 < 1.0) {
            return Err(Error::Config("beta2 must be in (0, 1)".into()));
        }
        if !(self.adam_eps > 0.0 && self.adam_eps.is_finite()) {
            return Err(Error::Config("adam_eps must be positive".into()));
        }
        if self.checkpoint_every < 1 {
            return Err(Error::Config("checkpoint_every must be >= 1".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HistoryRecord {
    pub step: u64,
    pub mean_loss: f64,
    pub coherence: f64,
}

#[derive(Clone, Debug)]
pub struct TrainState {
    pub params: ModelParams,
    /// Adam first moment.
    pub moment1: Gradients,
    /// Adam second moment.
    pub moment2: Gradients,
    pub step: u64,
    pub history: Vec<HistoryRecord>,
}

impl TrainState {
    pub fn new(params: ModelParams) -> Self {
        let moment1 = Gradients::zeros_like(&params);
        let moment2 = Gradients::zeros_like(&params);
        TrainState {
            params,
            moment1,
            moment2,
            step: 0,
            history: Vec::new(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct CheckpointRecord {
    pub step: u64,
    pub path: PathBuf,
    pub coherence: f64,
    pub mean_loss: f64,
}

/// One Adam update with bias correction. On a non-finite gradient the call
/// fails and the state is left untouched.
pub fn adam_step(state: &mut TrainState, grads: &Gradients, cfg: &TrainConfig) -> Result<()> {
    if !grads.is_finite() {
        return Err(Error::PoisonedStep {
            field: "gradients".into(),
        });
    }
    state.step += 1;
    let t = state.step as i32;
    let bc1 = 1.0 - cfg.adam_beta1.powi(t);
    let bc2 = 1.0 - cfg.adam_beta2.powi(t);
    let lr = cfg.learning_rate;
    let (b1, b2, eps) = (cfg.adam_beta1, cfg.adam_beta2, cfg.adam_eps);
    let mut params = state.params.arrays_mut();
    let mut m1 = state.moment1.arrays_mut();
    let mut m2 = state.moment2.arrays_mut();
    let g = grads.arrays();
    for ai in 0..g.len() {
        let (pa, ma, va, ga) = (&mut params[ai], &mut m1[ai], &mut m2[ai], g[ai]);
        for i in 0..ga.len() {
            ma[i] = b1 * ma[i] + (1.0 - b1) * ga[i];
            va[i] = b2 * va[i] + (1.0 - b2) * ga[i] * ga[i];
            let m_hat = ma[i] / bc1;
            let v_hat = va[i] / bc2;
            pa[i] -= lr * m_hat / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Mean loss and mean gradient over a batch of frames. Frames whose camera
/// degenerates are skipped and counted; the reduction is ordered so the
/// result is independent of the worker count.
pub fn batch_gradients(
    params: &ModelParams,
    dataset: &TrackSet,
    batch: &[usize],
) -> Result<(f64, Gradients, usize)> {
    let per_frame: Vec<Option<(f64, Gradients)>> = batch
        .par_iter()
        .map(|&fi| -> Result<Option<(f64, Gradients)>> {
            let w = &dataset.frames[fi].points;
            let trace = match forward(w, params) {
                Ok(t) => t,
                Err(Error::DegenerateCamera { .. }) => return Ok(None),
                Err(e) => return Err(e),
            };
            match backward(&trace, w, params) {
                Ok(g) => Ok(Some((trace.loss, g))),
                Err(Error::GradientInstability { .. }) => Ok(None),
                Err(e) => Err(e),
            }
        })
        .collect::<Result<Vec<_>>>()?;

    let mut total = Gradients::zeros_like(params);
    let mut loss_sum = 0.0;
    let mut ok = 0usize;
    for item in per_frame.iter().flatten() {
        loss_sum += item.0;
        total.accumulate(1.0, &item.1);
        ok += 1;
    }
    let skipped = batch.len() - ok;
    if ok == 0 {
        return Ok((f64::NAN, total, skipped));
    }
    let inv = 1.0 / ok as f64;
    total.scale(inv);
    Ok((loss_sum * inv, total, skipped))
}

/// Mean forward loss over a probe batch, used for the step-0 record.
fn probe_loss(params: &ModelParams, dataset: &TrackSet, limit: usize) -> f64 {
    let n = dataset.len().min(limit);
    let mut sum = 0.0;
    let mut ok = 0usize;
    for frame in dataset.frames.iter().take(n) {
        if let Ok(trace) = forward(&frame.points, params) {
            sum += trace.loss;
            ok += 1;
        }
    }
    if ok == 0 {
        f64::NAN
    } else {
        sum / ok as f64
    }
}

fn coherence_of(params: &ModelParams) -> Result<f64> {
    let dict = Dictionary::new(params.final_dictionary())?;
    mutual_coherence(&dict)
}

/// Run the optimization loop. Checkpoints (initial, every
/// `checkpoint_every` steps, and final) and the training log are written
/// under `out_dir`.
pub fn train(
    dataset: &TrackSet,
    sizes: &LayerSizes,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<(TrainState, Vec<CheckpointRecord>)> {
    cfg.validate()?;
    sizes.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("dataset has no frames".into()));
    }
    if dataset.p != sizes.p {
        return Err(Error::shape(format!(
            "dataset has p={} but the model expects p={}",
            dataset.p, sizes.p
        )));
    }
    std::fs::create_dir_all(out_dir)?;
    let mut log = std::fs::File::create(out_dir.join("train_log.csv"))?;
    writeln!(log, "step,mean_loss,coherence,wall_time")?;

    let started = Instant::now();
    let mut state = TrainState::new(init_params(sizes, cfg.seed)?);
    let mut records: Vec<CheckpointRecord> = Vec::new();

    fn save(
        state: &mut TrainState,
        records: &mut Vec<CheckpointRecord>,
        log: &mut std::fs::File,
        mean_loss: f64,
        out_dir: &Path,
        deterministic: bool,
        started: &Instant,
    ) -> Result<()> {
        let coherence = coherence_of(&state.params)?;
        let path = out_dir.join(format!("checkpoint_{:08}.ckpt", state.step));
        crate::network::checkpoint::save_checkpoint(&state.params, state.step, coherence, &path)?;
        let wall = if deterministic {
            0.0
        } else {
            started.elapsed().as_secs_f64()
        };
        writeln!(log, "{},{},{},{:.6}", state.step, mean_loss, coherence, wall)?;
        state.history.push(HistoryRecord {
            step: state.step,
            mean_loss,
            coherence,
        });
        records.push(CheckpointRecord {
            step: state.step,
            path,
            coherence,
            mean_loss,
        });
        Ok(())
    }

    let init_loss = probe_loss(&state.params, dataset, cfg.batch_size);
    save(
        &mut state,
        &mut records,
        &mut log,
        init_loss,
        out_dir,
        cfg.deterministic,
        &started,
    )?;

    let frame_count = dataset.len();
    let mut order: Vec<usize> = (0..frame_count).collect();
    let mut cursor = frame_count; // forces a shuffle on first use
    let mut epoch = 0u64;
    let mut bad_streak = 0usize;

    for _ in 0..cfg.steps {
        // next without-replacement batch, reshuffling per epoch
        if cursor >= frame_count {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            rng.set_stream(0x100 + epoch);
            for i in (1..frame_count).rev() {
                let j = rng.gen_range(0..=i);
                order.swap(i, j);
            }
            cursor = 0;
            epoch += 1;
        }
        let end = (cursor + cfg.batch_size).min(frame_count);
        let batch: Vec<usize> = order[cursor..end].to_vec();
        cursor = end;

        let (mean_loss, grads, _skipped) = batch_gradients(&state.params, dataset, &batch)?;
        let step_ok = mean_loss.is_finite()
            && match adam_step(&mut state, &grads, cfg) {
                Ok(()) => true,
                Err(Error::PoisonedStep { .. }) => false,
                Err(e) => return Err(e),
            };
        if step_ok {
            bad_streak = 0;
        } else {
            bad_streak += 1;
            state.step += 1; // a rejected step still consumes a step index
            if bad_streak >= 100 {
                return Err(Error::TrainingCollapse {
                    steps: bad_streak,
                    last_checkpoint: records.last().map(|r| r.path.clone()),
                });
            }
        }

        if state.step % cfg.checkpoint_every as u64 == 0 {
            save(
                &mut state,
                &mut records,
                &mut log,
                mean_loss,
                out_dir,
                cfg.deterministic,
                &started,
            )?;
        }
    }

    if records.last().map(|r| r.step) != Some(state.step) {
        let final_loss = probe_loss(&state.params, dataset, cfg.batch_size);
        save(
            &mut state,
            &mut records,
            &mut log,
            final_loss,
            out_dir,
            cfg.deterministic,
            &started,
        )?;
    }

    Ok((state, records))
}

/// The record with minimal coherence; ties break toward lower mean loss,
/// then toward the earlier step. NaN losses order last.
pub fn select_checkpoint(records: &[CheckpointRecord]) -> Result<CheckpointRecord> {
    if records.is_empty() {
        return Err(Error::EmptyHistory);
    }
    let key = |r: &CheckpointRecord| {
        let loss = if r.mean_loss.is_nan() {
            f64::INFINITY
        } else {
            r.mean_loss
        };
        (r.coherence, loss, r.step)
    };
    let mut best = &records[0];
    for r in &records[1..] {
        if key(r) < key(best) {
            best = r;
        }
    }
    Ok(best.clone())
}
