//! Training loop: residual targets, objective selection, AdamW, EMA,
//! checkpoint / resume and a JSON-lines log.
//!
//! All randomness is a pure function of `(seed, step)`: the data order comes
//! from a per-epoch seeded shuffle and each step draws `t` and ε from its own
//! ChaCha8 stream. A checkpoint therefore only needs the step counter and the
//! tensors to resume bit-exactly.

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::conditioning::{CondBatch, ConditionBundle};
use crate::datasim::FusionSample;
use crate::denoiser::{load_store, save_store, Denoiser, DenoiserConfig, TensorEntry};
use crate::diffusion::{scalar, LossKind, PredictionKind};
use crate::error::{Error, Result};
use crate::nn::{Graph, ParamStore, Tensor};
use crate::schedule::{NoiseSchedule, DEFAULT_OFFSET, DEFAULT_STEPS};
use crate::tensorio::ImageTensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub iterations: u64,
    pub batch_size: usize,
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub weight_decay: f64,
    /// Global gradient-norm clip; 0 disables it.
    pub grad_clip: f64,
    pub ema_decay: f64,
    pub diffusion_steps: usize,
    pub schedule_offset: f64,
    pub loss: LossKind,
    pub seed: u64,
    /// Steps between checkpoints; 0 writes only the final one.
    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            iterations: 3000,
            batch_size: 8,
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            weight_decay: 0.01,
            grad_clip: 1.0,
            ema_decay: 0.995,
            diffusion_steps: DEFAULT_STEPS,
            schedule_offset: DEFAULT_OFFSET,
            loss: LossKind::L1,
            seed: 0,
            checkpoint_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iterations == 0 {
            return Err(Error::config("iterations", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.ema_decay > 0.0 && self.ema_decay < 1.0) {
            return Err(Error::config("ema_decay", format!("{} is not in (0, 1)", self.ema_decay)));
        }
        if !(self.lr > 0.0) || !self.lr.is_finite() {
            return Err(Error::config("lr", "must be positive"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta1", "moment decays must lie in [0, 1)"));
        }
        if self.grad_clip < 0.0 || self.weight_decay < 0.0 {
            return Err(Error::config("grad_clip", "must be non-negative"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.diffusion_steps, self.schedule_offset)
    }
}

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub step: u64,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// How the per-step random streams are derived; echoed in checkpoints.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub scheme: String,
    pub seed: u64,
    pub next_step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub step: u64,
    pub train: TrainConfig,
    pub model: DenoiserConfig,
    pub params: BTreeMap<String, TensorEntry>,
    pub ema: BTreeMap<String, TensorEntry>,
    pub adam_m: BTreeMap<String, TensorEntry>,
    pub adam_v: BTreeMap<String, TensorEntry>,
    pub rng: RngState,
}

pub const CHECKPOINT_FILE: &str = "checkpoint.json";
const RNG_SCHEME: &str = "chacha8/seed/stream=step";

/// `ema ← d·ema + (1−d)·params`, elementwise in f64.
pub fn ema_update(ema: &mut ParamStore, params: &ParamStore, decay: f64) -> Result<()> {
    for (name, e) in ema.iter_mut() {
        let p = params.get(name)?;
        for (a, &b) in e.data_mut().iter_mut().zip(p.data()) {
            *a = (decay * *a as f64 + (1.0 - decay) * b as f64) as f32;
        }
    }
    Ok(())
}

/// Diffusion target for one sample: `gt − lrms_up` with residual learning,
/// `gt` otherwise.
pub fn clean_target(sample: &FusionSample, residual: bool) -> Result<ImageTensor> {
    let gt = sample
        .gt
        .as_ref()
        .ok_or_else(|| Error::invalid("training sample without ground truth"))?;
    Ok(if residual { gt.sub(&sample.lrms_up) } else { gt.clone() })
}

/// Index of the `pos`-th sample drawn (0-based over the whole run): epoch
/// `pos / n` uses its own seeded permutation.
pub fn data_index(seed: u64, n: usize, pos: u64) -> usize {
    let epoch = pos / n as u64;
    let mut perm: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_da7a);
    rng.set_stream(epoch);
    perm.shuffle(&mut rng);
    perm[(pos % n as u64) as usize]
}

fn step_rng(seed: u64, step: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(step);
    r
}

pub struct Trainer {
    pub cfg: TrainConfig,
    pub model: Denoiser,
    pub ema: ParamStore,
    adam_m: ParamStore,
    adam_v: ParamStore,
    pub step: u64,
    sch: NoiseSchedule,
}

impl Trainer {
    pub fn new(model_cfg: DenoiserConfig, cfg: TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let model = Denoiser::init(model_cfg, cfg.seed)?;
        let ema = model.params.clone();
        let adam_m = model.params.zeros_like();
        let adam_v = model.params.zeros_like();
        let sch = cfg.schedule()?;
        Ok(Trainer {
            cfg,
            model,
            ema,
            adam_m,
            adam_v,
            step: 0,
            sch,
        })
    }

    pub fn schedule(&self) -> &NoiseSchedule {
        &self.sch
    }

    /// The EMA weights wrapped as a model, used for evaluation.
    pub fn ema_model(&self) -> Denoiser {
        Denoiser {
            cfg: self.model.cfg.clone(),
            params: self.ema.clone(),
        }
    }

    fn batch_indices(&self, n: usize) -> Vec<usize> {
        let b = self.cfg.batch_size as u64;
        (0..b).map(|j| data_index(self.cfg.seed, n, self.step * b + j)).collect()
    }

    /// Loss and gradients for a batch at the current parameters.
    pub fn loss_and_grads(
        &self,
        batch: &[&FusionSample],
        rng: &mut ChaCha8Rng,
    ) -> Result<(f64, BTreeMap<String, Tensor>, Vec<usize>)> {
        let residual = self.model.cfg.residual;
        let kind = self.model.cfg.prediction_kind;
        let x0s: Vec<ImageTensor> = batch.iter().map(|s| clean_target(s, residual)).collect::<Result<_>>()?;
        let steps: Vec<usize> = batch.iter().map(|_| rng.random_range(1..=self.sch.steps())).collect();
        let mut xt = Vec::with_capacity(batch.len());
        let mut targets = Vec::with_capacity(batch.len());
        for (x0, &t) in x0s.iter().zip(&steps) {
            let ab = self.sch.alpha_bar(t);
            let eps = ImageTensor::from_fn(x0.bands(), x0.height(), x0.width(), |_, _, _| StandardNormal.sample(rng));
            xt.push(x0.zip_map(&eps, |a, e| scalar::x_t(a as f64, e as f64, ab) as f32));
            targets.push(match kind {
                PredictionKind::X0 => x0.clone(),
                PredictionKind::Epsilon => eps,
                PredictionKind::V => x0.zip_map(&eps, |a, e| scalar::v(a as f64, e as f64, ab) as f32),
            });
        }
        let bundles: Vec<ConditionBundle> = batch.iter().map(|s| s.bundle()).collect::<Result<_>>()?;
        let cond = CondBatch::from_bundles(&bundles.iter().collect::<Vec<_>>())?;
        let xt_refs: Vec<&ImageTensor> = xt.iter().collect();
        let tg_refs: Vec<&ImageTensor> = targets.iter().collect();

        let mut g = Graph::new();
        let xv = g.input(Tensor::from_images(&xt_refs)?);
        let out = self.model.build(&mut g, xv, &steps, &cond)?;
        let target = Tensor::from_images(&tg_refs)?;
        let root = match self.cfg.loss {
            LossKind::L1 => g.l1_loss(out, target),
            LossKind::L2 => g.l2_loss(out, target),
        };
        let loss = g.scalar(root);
        let params = &self.model.params;
        let grads = g
            .backward(root)
            .params(|n| params.get(n).map(|t| t.shape()).unwrap_or([1, 1, 1, 1]));
        Ok((loss, grads, steps))
    }

    /// One optimisation step on `batch`; returns its log record.
    pub fn train_step(&mut self, batch: &[&FusionSample], rng: &mut ChaCha8Rng) -> Result<LogRecord> {
        let (loss, mut grads, steps) = self.loss_and_grads(batch, rng)?;
        let grad_norm = grads.values().map(Tensor::sum_sq).sum::<f64>().sqrt();
        if !loss.is_finite() || !grad_norm.is_finite() {
            return Err(Error::Diverged {
                step: self.step,
                t: steps.first().copied().unwrap_or(0),
                loss,
                grad_norm,
            });
        }
        if self.cfg.grad_clip > 0.0 && grad_norm > self.cfg.grad_clip {
            let k = (self.cfg.grad_clip / grad_norm) as f32;
            for g in grads.values_mut() {
                g.data_mut().iter_mut().for_each(|v| *v *= k);
            }
        }
        self.adamw(&grads)?;
        ema_update(&mut self.ema, &self.model.params, self.cfg.ema_decay)?;
        self.step += 1;
        Ok(LogRecord {
            step: self.step,
            loss,
            grad_norm,
            lr: self.cfg.lr,
        })
    }

    fn adamw(&mut self, grads: &BTreeMap<String, Tensor>) -> Result<()> {
        let c = &self.cfg;
        let k = (self.step + 1) as i32;
        let bc1 = 1.0 - c.beta1.powi(k);
        let bc2 = 1.0 - c.beta2.powi(k);
        for (name, p) in self.model.params.iter_mut() {
            let g = grads
                .get(name)
                .ok_or_else(|| Error::config(name.as_str(), "no gradient"))?;
            let m = self.adam_m.get_mut(name).expect("moments match params");
            let v = self.adam_v.get_mut(name).expect("moments match params");
            let decay = if name.ends_with(".weight") { c.weight_decay } else { 0.0 };
            for (((pi, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                let gi = gi as f64;
                let mn = c.beta1 * *mi as f64 + (1.0 - c.beta1) * gi;
                let vn = c.beta2 * *vi as f64 + (1.0 - c.beta2) * gi * gi;
                *mi = mn as f32;
                *vi = vn as f32;
                let upd = (mn / bc1) / ((vn / bc2).sqrt() + c.adam_eps);
                let pv = *pi as f64;
                *pi = (pv - c.lr * (upd + decay * pv)) as f32;
            }
        }
        Ok(())
    }

    /// Runs steps until `until` (exclusive upper bound on the step counter),
    /// appending one JSON line per step to `log`.
    pub fn run(&mut self, data: &[FusionSample], until: u64, log: &mut dyn Write) -> Result<Vec<LogRecord>> {
        if data.is_empty() {
            return Err(Error::invalid("empty training set"));
        }
        let mut out = Vec::new();
        while self.step < until {
            let idx = self.batch_indices(data.len());
            let batch: Vec<&FusionSample> = idx.iter().map(|&i| &data[i]).collect();
            let mut rng = step_rng(self.cfg.seed, self.step);
            let rec = self.train_step(&batch, &mut rng)?;
            let line = serde_json::to_string(&rec).expect("log record serializes");
            writeln!(log, "{line}").map_err(|e| Error::io("<training log>", e))?;
            out.push(rec);
        }
        Ok(out)
    }

    /// Writes the full training state under `dir`, plus the EMA weights as a
    /// loadable model in `dir/model`.
    pub fn save_checkpoint(&self, dir: &Path) -> Result<CheckpointManifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let m = CheckpointManifest {
            step: self.step,
            train: self.cfg.clone(),
            model: self.model.cfg.clone(),
            params: save_store(&self.model.params, &dir.join("params"))?,
            ema: save_store(&self.ema, &dir.join("ema"))?,
            adam_m: save_store(&self.adam_m, &dir.join("adam_m"))?,
            adam_v: save_store(&self.adam_v, &dir.join("adam_v"))?,
            rng: RngState {
                scheme: RNG_SCHEME.into(),
                seed: self.cfg.seed,
                next_step: self.step,
            },
        };
        self.ema_model().save(dir.join("model"))?;
        let path = dir.join(CHECKPOINT_FILE);
        let text = serde_json::to_string_pretty(&m).map_err(|e| Error::json(&path, e))?;
        fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        Ok(m)
    }

    pub fn load_checkpoint(dir: &Path) -> Result<Self> {
        let path = dir.join(CHECKPOINT_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: CheckpointManifest = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        if m.rng.scheme != RNG_SCHEME || m.rng.next_step != m.step {
            return Err(Error::config("rng", format!("unsupported rng state {:?}", m.rng)));
        }
        m.train.validate()?;
        let model = Denoiser::from_parts(m.model.clone(), load_store(&m.params, &dir.join("params"))?)?;
        let check = |s: ParamStore, what: &str| -> Result<ParamStore> {
            Denoiser::from_parts(m.model.clone(), s).map(|d| d.params).map_err(|e| {
                Error::config(what, e.to_string())
            })
        };
        let ema = check(load_store(&m.ema, &dir.join("ema"))?, "ema")?;
        let adam_m = check(load_store(&m.adam_m, &dir.join("adam_m"))?, "adam_m")?;
        let adam_v = check(load_store(&m.adam_v, &dir.join("adam_v"))?, "adam_v")?;
        let sch = m.train.schedule()?;
        Ok(Trainer {
            cfg: m.train,
            model,
            ema,
            adam_m,
            adam_v,
            step: m.step,
            sch,
        })
    }
}

/// Paths written by [`train`].
#[derive(Clone, Debug)]
pub struct TrainOutputs {
    pub checkpoint: PathBuf,
    pub log: PathBuf,
    pub manifest: CheckpointManifest,
    pub records: Vec<LogRecord>,
}

/// Trains from scratch, or from `out/checkpoint.json` when `resume` is set,
/// up to `cfg.iterations` steps. Logs to `out/train_log.jsonl`.
pub fn train(data: &[FusionSample], model_cfg: DenoiserConfig, cfg: TrainConfig, out: &Path, resume: bool) -> Result<TrainOutputs> {
    let ckpt = out.join("checkpoint");
    let mut trainer = if resume {
        let mut t = Trainer::load_checkpoint(&ckpt)?;
        if t.model.cfg != model_cfg {
            return Err(Error::config("model", "checkpoint was trained with a different model config"));
        }
        t.cfg.iterations = cfg.iterations;
        t.cfg.checkpoint_every = cfg.checkpoint_every;
        t
    } else {
        Trainer::new(model_cfg, cfg)?
    };
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let log_path = out.join("train_log.jsonl");
    let mut log = fs::OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;
    let total = trainer.cfg.iterations;
    let every = trainer.cfg.checkpoint_every;
    let mut records = Vec::new();
    while trainer.step < total {
        let stop = if every > 0 { ((trainer.step / every) + 1) * every } else { total };
        records.extend(trainer.run(data, stop.min(total), &mut log)?);
        if let Some(r) = records.last() {
            log::info!("step {} loss {:.5} grad_norm {:.4}", r.step, r.loss, r.grad_norm);
        }
        trainer.save_checkpoint(&ckpt)?;
    }
    let manifest = trainer.save_checkpoint(&ckpt)?;
    Ok(TrainOutputs {
        checkpoint: ckpt,
        log: log_path,
        manifest,
        records,
    })
}

/// Moving average of the loss over the trailing `window` records.
pub fn smoothed_loss(records: &[LogRecord], at: usize, window: usize) -> f64 {
    let end = (at + 1).min(records.len());
    let start = end.saturating_sub(window);
    records[start..end].iter().map(|r| r.loss).sum::<f64>() / (end - start) as f64
}
