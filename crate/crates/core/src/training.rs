//! Adam, batching and the staged training loop.
//!
//! Training runs a list of stages in order (for example a large noisy corpus
//! followed by a small clean one). Each stage continues from the parameters
//! the previous one left behind. Within a stage, validation perplexity after
//! each epoch drives early stopping. The learning rate is constant.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::checkpoint::write_atomic;
use crate::error::{Error, Result};
use crate::evaluation::perplexity;
use crate::models::{Example, Model};
use crate::rng::SeededRng;
use crate::tensor::{ParamStore, Real, Tape};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment estimates for every parameter of one store, in store order.
#[derive(Clone, Debug)]
pub struct AdamState<T> {
    pub config: AdamConfig,
    pub step: u64,
    m: Vec<Vec<T>>,
    v: Vec<Vec<T>>,
}

impl<T: Real> AdamState<T> {
    pub fn new(params: &ParamStore<T>, config: AdamConfig) -> Self {
        let zeros = || params.iter().map(|(_, _, t)| vec![T::zero(); t.len()]).collect();
        Self {
            config,
            step: 0,
            m: zeros(),
            v: zeros(),
        }
    }

    pub fn first_moment(&self, index: usize) -> &[T] {
        &self.m[index]
    }

    pub fn second_moment(&self, index: usize) -> &[T] {
        &self.v[index]
    }

    /// Applies one bias-corrected update from the gradients accumulated in
    /// `params`:
    ///
    /// ```text
    /// m ← β₁m + (1−β₁)g      v ← β₂v + (1−β₂)g²
    /// θ ← θ − lr · (m / (1−β₁ᵗ)) / (√(v / (1−β₂ᵗ)) + ε)
    /// ```
    ///
    /// Nothing is modified if any gradient entry is non-finite.
    pub fn update(&mut self, params: &mut ParamStore<T>) -> Result<()> {
        for (_, name, t) in params.iter() {
            if t.grad().is_some_and(|g| g.iter().any(|x| !x.is_finite())) {
                return Err(Error::NonFiniteGradient(name.to_string()));
            }
        }
        self.step += 1;
        let c = self.config;
        let (b1, b2) = (T::lit(c.beta1), T::lit(c.beta2));
        let (one, lr, eps) = (T::one(), T::lit(c.lr), T::lit(c.eps));
        let bc1 = one - T::lit(c.beta1.powi(self.step as i32));
        let bc2 = one - T::lit(c.beta2.powi(self.step as i32));
        let ids: Vec<_> = params.ids().collect();
        for (i, id) in ids.into_iter().enumerate() {
            let t = params.get_mut(id);
            let Some(g) = t.grad().map(<[T]>::to_vec) else { continue };
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, x) in t.data_mut().iter_mut().enumerate() {
                m[k] = b1 * m[k] + (one - b1) * g[k];
                v[k] = b2 * v[k] + (one - b2) * g[k] * g[k];
                let delta = lr * (m[k] / bc1) / ((v[k] / bc2).sqrt() + eps);
                // Skipping zero steps keeps `-0.0` parameters bit-identical.
                if delta != T::zero() {
                    *x -= delta;
                }
            }
        }
        Ok(())
    }
}

/// Rescales accumulated gradients so their global L2 norm is at most
/// `max_norm`. Returns the pre-clip norm when clipping happened.
pub fn clip_grad_norm<T: Real>(params: &mut ParamStore<T>, max_norm: f64) -> Option<f64> {
    let norm = params.grad_norm();
    if norm.is_nan() || norm <= max_norm {
        return None;
    }
    let factor = T::lit(max_norm / norm);
    let ids: Vec<_> = params.ids().collect();
    for id in ids {
        if let Some(g) = params.get_mut(id).grad_mut() {
            g.iter_mut().for_each(|x| *x *= factor);
        }
    }
    Some(norm)
}

/// Buckets examples by `(turns, longest utterance)`, then cuts batches.
///
/// Examples are shuffled under `rng` and stably sorted by bucket key, so
/// batches mostly share a shape. The batch order is shuffled again.
pub fn make_batches(examples: &[Example], batch_size: usize, rng: &mut SeededRng) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::contract("batch size must be at least 1"));
    }
    let mut order: Vec<usize> = (0..examples.len()).collect();
    rng.shuffle(&mut order);
    order.sort_by_key(|&i| {
        let e = &examples[i];
        (e.context.turns(), e.max_utterance_len().max(e.target_len()))
    });
    let mut batches: Vec<Vec<usize>> = order.chunks(batch_size).map(<[usize]>::to_vec).collect();
    rng.shuffle(&mut batches);
    Ok(batches)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSpec {
    pub name: String,
    pub epochs: usize,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default)]
    pub seed: u64,
}

fn default_batch_size() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainOptions {
    pub adam: AdamConfig,
    /// Global gradient-norm clip; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Stop a stage after this many consecutive validations without a new
    /// best perplexity.
    pub patience: Option<usize>,
    /// End a stage as soon as validation perplexity falls below this.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub stop_below: Option<f64>,
    /// Where stage checkpoints and divergence dumps are written.
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for TrainOptions {
    fn default() -> Self {
        Self {
            adam: AdamConfig::default(),
            clip_norm: Some(5.0),
            patience: None,
            stop_below: None,
            checkpoint_dir: None,
        }
    }
}

/// One stage's data.
pub struct StageData<'a> {
    pub spec: StageSpec,
    pub train: &'a [Example],
    pub val: &'a [Example],
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum LogRecord {
    /// Loss of the incoming parameters on the stage's training set.
    StageStart {
        stage: String,
        initial_train_loss: f64,
        train_pairs: usize,
        val_pairs: usize,
    },
    Epoch {
        stage: String,
        epoch: usize,
        train_loss: f64,
        #[serde(skip_serializing_if = "Option::is_none")]
        val_perplexity: Option<f64>,
        clipped_batches: usize,
        /// Relative to the checkpoint directory.
        #[serde(skip_serializing_if = "Option::is_none")]
        checkpoint: Option<PathBuf>,
    },
    EarlyStop {
        stage: String,
        epoch: usize,
        best_val_perplexity: f64,
    },
}

/// Everything in the log is a function of seeds and data. Wall-clock time
/// is kept apart in `timings` so repeated runs produce identical logs.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub records: Vec<LogRecord>,
    /// Seconds per epoch, aligned with the `Epoch` records.
    pub timings: Vec<f64>,
}

impl TrainLog {
    pub fn to_jsonl(&self) -> String {
        self.records
            .iter()
            .map(|r| serde_json::to_string(r).expect("log record serializes") + "\n")
            .collect()
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_jsonl().as_bytes())
    }

    pub fn save_timings(&self, path: &Path) -> Result<()> {
        let f = File::create(path).map_err(|e| Error::io(path, e))?;
        let mut w = BufWriter::new(f);
        for (i, t) in self.timings.iter().enumerate() {
            writeln!(w, "{{\"epoch\":{},\"wall_seconds\":{t:.3}}}", i + 1).map_err(|e| Error::io(path, e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn epochs(&self) -> impl Iterator<Item = &LogRecord> {
        self.records.iter().filter(|r| matches!(r, LogRecord::Epoch { .. }))
    }

    pub fn last_train_loss(&self) -> Option<f64> {
        self.records.iter().rev().find_map(|r| match r {
            LogRecord::Epoch { train_loss, .. } => Some(*train_loss),
            _ => None,
        })
    }
}

/// Mean per-token loss over `examples`, computed in chunks without a
/// backward pass.
pub fn mean_loss<T: Real>(model: &Model<T>, examples: &[Example], chunk: usize) -> Result<f64> {
    let (mut nll, mut tokens) = (0.0, 0usize);
    for part in examples.chunks(chunk.max(1)) {
        let refs: Vec<&Example> = part.iter().collect();
        let mut t = Tape::new(&model.params);
        let (sum, n) = model.nll(&mut t, &refs)?;
        nll += t.value(sum)[0].as_f64();
        tokens += n;
    }
    if tokens == 0 {
        return Err(Error::contract("no target tokens"));
    }
    Ok(nll / tokens as f64)
}

/// Forward and backward over one batch, leaving gradients accumulated in
/// the parameters. Returns the per-token loss.
pub fn accumulate_batch<T: Real>(model: &mut Model<T>, batch: &[&Example]) -> Result<f64> {
    let (loss, grads) = {
        let mut t = Tape::new(&model.params);
        let loss = model.arch.forward_loss(&mut t, batch)?;
        let value = t.value(loss)[0].as_f64();
        if !value.is_finite() {
            return Ok(value);
        }
        (value, t.backward(loss)?)
    };
    model.params.accumulate(&grads);
    Ok(loss)
}

/// Runs every stage in order and returns the log. The model keeps the
/// parameters of the last update.
pub fn train<T: Real>(model: &mut Model<T>, stages: &[StageData<'_>], opts: &TrainOptions) -> Result<TrainLog> {
    if stages.is_empty() {
        return Err(Error::contract("training schedule has no stages"));
    }
    let mut adam = AdamState::new(&model.params, opts.adam);
    let mut log = TrainLog::default();
    let mut epoch_no = 0;
    for stage in stages {
        let spec = &stage.spec;
        if stage.train.is_empty() {
            return Err(Error::contract(format!("stage {} has no training pairs", spec.name)));
        }
        log.records.push(LogRecord::StageStart {
            stage: spec.name.clone(),
            initial_train_loss: mean_loss(model, stage.train, spec.batch_size)?,
            train_pairs: stage.train.len(),
            val_pairs: stage.val.len(),
        });
        let mut rng = SeededRng::new(spec.seed);
        let mut best = f64::INFINITY;
        let mut stale = 0;
        for e in 0..spec.epochs {
            let started = std::time::Instant::now();
            epoch_no += 1;
            let batches = make_batches(stage.train, spec.batch_size, &mut rng)?;
            let (mut loss_sum, mut token_sum, mut clipped) = (0.0, 0usize, 0);
            for (b, idx) in batches.iter().enumerate() {
                let batch: Vec<&Example> = idx.iter().map(|&i| &stage.train[i]).collect();
                model.params.zero_grads();
                let loss = accumulate_batch(model, &batch)?;
                if !loss.is_finite() {
                    let dump = dump_state(model, opts, &spec.name, epoch_no)?;
                    log::error!("diverged at epoch {epoch_no}, batch {b}; state written to {dump:?}");
                    return Err(Error::Diverged {
                        epoch: epoch_no,
                        batch: b,
                        loss,
                    });
                }
                let n: usize = batch.iter().map(|x| x.target_len()).sum();
                loss_sum += loss * n as f64;
                token_sum += n;
                if let Some(norm) = opts.clip_norm.and_then(|c| clip_grad_norm(&mut model.params, c)) {
                    clipped += 1;
                    log::debug!("epoch {epoch_no} batch {b}: clipped gradient norm {norm:.3}");
                }
                adam.update(&mut model.params)?;
            }
            model.params.zero_grads();
            if clipped > 0 {
                log::info!("epoch {epoch_no}: gradient clipped in {clipped} of {} batches", batches.len());
            }
            let val_ppl = if stage.val.is_empty() {
                None
            } else {
                Some(perplexity(model, stage.val)?)
            };
            let last = e + 1 == spec.epochs;
            let mut stop = false;
            if let Some(p) = val_ppl {
                if p < best {
                    best = p;
                    stale = 0;
                } else {
                    stale += 1;
                }
                stop = opts.patience.is_some_and(|n| stale >= n) || opts.stop_below.is_some_and(|t| p < t);
            }
            let checkpoint = match (&opts.checkpoint_dir, last || stop) {
                (Some(dir), true) => {
                    let name = PathBuf::from(format!("{}.ckpt", spec.name));
                    model.save(&dir.join(&name))?;
                    Some(name)
                }
                _ => None,
            };
            let train_loss = loss_sum / token_sum as f64;
            log::info!("stage {} epoch {epoch_no}: loss {train_loss:.4} val ppl {val_ppl:?}", spec.name);
            log.records.push(LogRecord::Epoch {
                stage: spec.name.clone(),
                epoch: epoch_no,
                train_loss,
                val_perplexity: val_ppl,
                clipped_batches: clipped,
                checkpoint,
            });
            log.timings.push(started.elapsed().as_secs_f64());
            if stop {
                log.records.push(LogRecord::EarlyStop {
                    stage: spec.name.clone(),
                    epoch: epoch_no,
                    best_val_perplexity: best,
                });
                break;
            }
        }
    }
    Ok(log)
}

fn dump_state<T: Real>(model: &Model<T>, opts: &TrainOptions, stage: &str, epoch: usize) -> Result<Option<PathBuf>> {
    match &opts.checkpoint_dir {
        Some(dir) => {
            let path = dir.join(format!("{stage}-diverged-epoch{epoch}.ckpt"));
            model.save(&path)?;
            Ok(Some(path))
        }
        None => Ok(None),
    }
}
