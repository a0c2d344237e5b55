//! Self-supervised pretraining loop.
//!
//! Each step draws two augmented views per frame of a batch, runs both
//! through the online network as one `2N` batch, evaluates the configured
//! objective, and applies one SGD step. BYOL additionally maintains an EMA
//! target network; SwAV keeps unit-norm prototypes that stay frozen for the
//! first `prototype_freeze_steps` steps.
//!
//! Iteration order is a seeded permutation per epoch and views come from
//! per-sample generator substreams, so a run is a pure function of the
//! config and the frames.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{make_views, view_rng, AugmentationPolicy};
use crate::autodiff::{NormMode, Tape, Var};
use crate::checkpoint::{self, NamedTensors};
use crate::encoder::{frames_to_tensor, Encoder, EncoderConfig, EncoderNet, PARAM_PREFIX};
use crate::error::{CheckpointError, ConfigError, TensorError, TrainError};
use crate::frame::Frame;
use crate::nn::{collect_grads, he_uniform, Ctx, Mlp, ParamId, ParamStore, RunningUpdate};
use crate::objectives::{
    byol_loss_symmetric, ema_update, nt_xent_loss, prototype_renormalize, swav_loss, ByolConfig, Method,
    ProjectionHeadConfig, SimClrConfig, SwavConfig,
};
use crate::optim::{OptimizerState, SgdConfig};
use crate::tensor::Tensor;

const TARGET_PREFIX: &str = "target/";
const VELOCITY_PREFIX: &str = "optim/velocity/";
const META_NAME: &str = "meta/state";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub method: Method,
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub encoder: EncoderConfig,
    pub augmentation: AugmentationPolicy,
    pub projector: ProjectionHeadConfig,
    pub simclr: SimClrConfig,
    pub byol: ByolConfig,
    pub swav: SwavConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let sgd = SgdConfig::default();
        TrainConfig {
            method: Method::SimClr,
            epochs: 10,
            batch_size: 64,
            learning_rate: sgd.learning_rate,
            momentum: sgd.momentum,
            weight_decay: sgd.weight_decay,
            seed: 0,
            encoder: EncoderConfig::default(),
            augmentation: AugmentationPolicy::default(),
            projector: ProjectionHeadConfig::default(),
            simclr: SimClrConfig::default(),
            byol: ByolConfig::default(),
            swav: SwavConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn sgd(&self) -> SgdConfig {
        SgdConfig { learning_rate: self.learning_rate, momentum: self.momentum, weight_decay: self.weight_decay }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.epochs == 0 {
            return Err(ConfigError::Invalid("epochs must be positive".into()));
        }
        if self.batch_size == 0 {
            return Err(ConfigError::Invalid("batch_size must be positive".into()));
        }
        if self.batch_size < 2 && matches!(self.method, Method::SimClr | Method::Swav) {
            return Err(ConfigError::Invalid(format!("{} needs batch_size >= 2", self.method)));
        }
        if self.learning_rate <= 0.0 {
            return Err(ConfigError::Invalid(format!("learning_rate must be positive, got {}", self.learning_rate)));
        }
        self.sgd().validate().map_err(ConfigError::Invalid)?;
        self.encoder.validate()?;
        self.augmentation.validate()?;
        self.projector.validate()?;
        match self.method {
            Method::SimClr => self.simclr.validate(),
            Method::Byol => self.byol.validate(),
            Method::Swav => self.swav.validate(),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub loss: f32,
}

/// Per-step losses (recorded before each update) and per-epoch wall clock.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    pub epoch_seconds: Vec<f64>,
}

impl TrainLog {
    /// `(epoch, mean loss)` in epoch order.
    pub fn epoch_means(&self) -> Vec<(usize, f64)> {
        let mut sums: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
        for e in &self.entries {
            let s = sums.entry(e.epoch).or_default();
            s.0 += e.loss as f64;
            s.1 += 1;
        }
        sums.into_iter().map(|(epoch, (sum, n))| (epoch, sum / n as f64)).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("step,epoch,loss\n");
        for e in &self.entries {
            out.push_str(&format!("{},{},{:?}\n", e.step, e.epoch, e.loss));
        }
        out
    }

    pub fn write_csv(&self, path: &Path) -> std::io::Result<()> {
        std::fs::write(path, self.to_csv())
    }
}

/// Online network, method heads and (for BYOL) the EMA target.
#[derive(Clone, Debug)]
pub struct SslModel {
    method: Method,
    encoder: EncoderNet,
    projector: Mlp,
    predictor: Option<Mlp>,
    prototypes: Option<ParamId>,
    pub online: ParamStore<f32>,
    target: Option<(EncoderNet, Mlp, ParamStore<f32>)>,
}

impl SslModel {
    pub fn build(config: &TrainConfig) -> Self {
        let d = config.encoder.embedding_dim;
        let p = config.projector.output_dim;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut online = ParamStore::new();
        let encoder = EncoderNet::build(&config.encoder, PARAM_PREFIX, &mut online, &mut rng);
        let projector = Mlp::new(&mut online, "projector", d, config.projector.hidden_dim, p, &mut rng);
        let mut predictor = None;
        let mut prototypes = None;
        let mut target = None;
        match config.method {
            Method::SimClr => {}
            Method::Byol => {
                predictor = Some(Mlp::new(&mut online, "predictor", p, config.byol.predictor_hidden_dim, p, &mut rng));
                let mut store = ParamStore::new();
                let mut scratch = ChaCha8Rng::seed_from_u64(config.seed);
                let enc = EncoderNet::build(&config.encoder, PARAM_PREFIX, &mut store, &mut scratch);
                let proj = Mlp::new(&mut store, "projector", d, config.projector.hidden_dim, p, &mut scratch);
                ema_update(&mut store, &online, 0.0).expect("target mirrors online layout");
                target = Some((enc, proj, store));
            }
            Method::Swav => {
                let k = config.swav.num_prototypes;
                let mut t = he_uniform::<f32>(&[p, k], p, &mut rng);
                prototype_renormalize(&mut t, &mut rng);
                prototypes = Some(online.add("prototypes", t, true));
            }
        }
        SslModel { method: config.method, encoder, projector, predictor, prototypes, online, target }
    }

    pub fn method(&self) -> Method {
        self.method
    }

    pub fn target(&self) -> Option<&ParamStore<f32>> {
        self.target.as_ref().map(|t| &t.2)
    }

    pub fn prototypes(&self) -> Option<ParamId> {
        self.prototypes
    }

    fn embed(encoder: &EncoderNet, projector: &Mlp, ctx: &mut Ctx<'_, f32>, x: Var) -> Result<Var, TensorError> {
        let h = encoder.forward(ctx, x)?;
        projector.forward(ctx, h)
    }
}

fn rows(tape: &mut Tape<f32>, v: Var, start: usize, count: usize) -> Result<Var, TensorError> {
    let width = tape.shape(v)[1];
    let idx = (start * width..(start + count) * width).collect();
    let flat = tape.select(v, idx)?;
    tape.reshape(flat, vec![count, width])
}

/// Gradients from one forward/backward pass, not yet applied.
#[derive(Debug)]
pub struct PendingStep {
    pub loss: f32,
    updates: Vec<RunningUpdate<f32>>,
}

#[derive(Debug)]
pub struct Trainer {
    config: TrainConfig,
    model: SslModel,
    optimizer: OptimizerState<f32>,
    step: usize,
    epoch: usize,
    log: TrainLog,
    abort_checkpoint: Option<PathBuf>,
}

impl Trainer {
    pub fn new(config: TrainConfig) -> Result<Self, TrainError> {
        config.validate()?;
        let model = SslModel::build(&config);
        let optimizer = OptimizerState::new(config.sgd(), &model.online);
        Ok(Trainer { config, model, optimizer, step: 0, epoch: 0, log: TrainLog::default(), abort_checkpoint: None })
    }

    /// Where to persist the last good state if a numerical abort happens.
    pub fn with_abort_checkpoint(mut self, path: impl Into<PathBuf>) -> Self {
        self.abort_checkpoint = Some(path.into());
        self
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn model(&self) -> &SslModel {
        &self.model
    }

    pub fn optimizer(&self) -> &OptimizerState<f32> {
        &self.optimizer
    }

    pub fn log(&self) -> &TrainLog {
        &self.log
    }

    pub fn into_log(self) -> TrainLog {
        self.log
    }

    pub fn steps_done(&self) -> usize {
        self.step
    }

    pub fn epochs_done(&self) -> usize {
        self.epoch
    }

    /// Seeded visiting order for `epoch`.
    pub fn epoch_order(seed: u64, epoch: usize, n: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5DEE_CE66_D1CE_5EED);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn view_seed(&self) -> u64 {
        self.config.seed.wrapping_add(self.config.augmentation.seed.wrapping_mul(0x2545_F491_4F6C_DD1D))
    }

    /// Runs `config.epochs` epochs.
    pub fn train(&mut self, frames: &[Frame]) -> Result<(), TrainError> {
        for _ in 0..self.config.epochs {
            self.run_epoch(frames)?;
        }
        Ok(())
    }

    /// One pass over `frames` in full batches; the last partial batch is dropped.
    pub fn run_epoch(&mut self, frames: &[Frame]) -> Result<(), TrainError> {
        if frames.is_empty() {
            return Err(TrainError::EmptyDataset);
        }
        let b = self.config.batch_size;
        if frames.len() < b {
            return Err(TrainError::NoFullBatch { frames: frames.len(), batch_size: b });
        }
        let start = Instant::now();
        let order = Self::epoch_order(self.config.seed, self.epoch, frames.len());
        for batch in order.chunks_exact(b) {
            self.step_batch(frames, batch)?;
        }
        self.log.epoch_seconds.push(start.elapsed().as_secs_f64());
        if let Some(&(e, mean)) = self.log.epoch_means().last() {
            log::info!("{} epoch {e}: mean loss {mean:.5}", self.config.method);
        }
        self.epoch += 1;
        Ok(())
    }

    /// Forward, backward and update on the frames at `indices`.
    pub fn step_batch(&mut self, frames: &[Frame], indices: &[usize]) -> Result<f32, TrainError> {
        let pending = self.compute_gradients(frames, indices)?;
        let loss = pending.loss;
        self.apply_update(pending)?;
        Ok(loss)
    }

    fn views_tensor(&self, frames: &[Frame], indices: &[usize]) -> Result<Tensor<f32>, TensorError> {
        let enc = &self.config.encoder;
        let seed = self.view_seed();
        let (mut first, mut second) = (Vec::with_capacity(indices.len()), Vec::with_capacity(indices.len()));
        for &i in indices {
            let mut rng = view_rng(seed, self.epoch as u64, i as u64);
            let (a, b) = make_views(&frames[i], &self.config.augmentation, enc.input_height, enc.input_width, &mut rng);
            first.push(a);
            second.push(b);
        }
        let refs: Vec<&Frame> = first.iter().chain(&second).collect();
        frames_to_tensor(&refs)
    }

    fn abort(&self, reason: String) -> TrainError {
        let checkpoint = self.abort_checkpoint.as_ref().and_then(|p| match self.save_checkpoint(p) {
            Ok(()) => Some(p.clone()),
            Err(e) => {
                log::error!("could not write abort checkpoint: {e}");
                None
            }
        });
        log::error!("numerical abort at step {}: {reason}", self.step);
        TrainError::NumericalAbort { step: self.step, epoch: self.epoch, reason, checkpoint }
    }

    /// Forward and backward pass; gradients land in the online store's
    /// gradient slots. No parameter, target or statistic is modified.
    pub fn compute_gradients(&mut self, frames: &[Frame], indices: &[usize]) -> Result<PendingStep, TrainError> {
        let n = indices.len();
        if n == 0 {
            return Err(TrainError::EmptyDataset);
        }
        let x = self.views_tensor(frames, indices)?;
        let model = &self.model;
        let mut tape = Tape::<f32>::new();
        let target_z = match &model.target {
            Some((enc, proj, store)) => {
                let mut tt = Tape::<f32>::new();
                let xt = tt.constant(x.clone());
                let mut ctx = Ctx::new(&mut tt, store, NormMode::Train, false);
                let z = SslModel::embed(enc, proj, &mut ctx, xt)?;
                Some(tt.value(z).clone())
            }
            None => None,
        };
        let xv = tape.constant(x);
        let mut ctx = Ctx::new(&mut tape, &model.online, NormMode::Train, true);
        let z = SslModel::embed(&model.encoder, &model.projector, &mut ctx, xv)?;
        let (loss, bindings, updates) = match model.method {
            Method::SimClr => {
                let (bindings, updates) = ctx.finish();
                (nt_xent_loss(&mut tape, z, self.config.simclr.temperature)?, bindings, updates)
            }
            Method::Byol => {
                let pred = model.predictor.as_ref().expect("byol predictor").forward(&mut ctx, z)?;
                let (bindings, updates) = ctx.finish();
                let tz = tape.constant(target_z.expect("byol target"));
                let (p1, p2) = (rows(&mut tape, pred, 0, n)?, rows(&mut tape, pred, n, n)?);
                let (t1, t2) = (rows(&mut tape, tz, 0, n)?, rows(&mut tape, tz, n, n)?);
                (byol_loss_symmetric(&mut tape, p1, p2, t1, t2)?, bindings, updates)
            }
            Method::Swav => {
                let protos = ctx.param(model.prototypes.expect("swav prototypes"));
                let (bindings, updates) = ctx.finish();
                let (z1, z2) = (rows(&mut tape, z, 0, n)?, rows(&mut tape, z, n, n)?);
                (swav_loss(&mut tape, z1, z2, protos, &self.config.swav)?.0, bindings, updates)
            }
        };
        let value = tape.data(loss)[0];
        if !value.is_finite() {
            return Err(self.abort(format!("loss is {value}")));
        }
        tape.backward(loss)?;
        let frozen = self.frozen_prototypes();
        let online = &mut self.model.online;
        online.zero_grads();
        collect_grads(&tape, &bindings, online)?;
        if let Some(id) = frozen {
            let zeros = vec![0.0; online.get(id).numel()];
            online.get_mut(id).set_grad(zeros)?;
        }
        Ok(PendingStep { loss: value, updates })
    }

    fn frozen_prototypes(&self) -> Option<ParamId> {
        self.model.prototypes.filter(|_| self.step < self.config.swav.prototype_freeze_steps)
    }

    /// Optimizer step followed by running-stat, EMA and prototype maintenance.
    pub fn apply_update(&mut self, pending: PendingStep) -> Result<(), TrainError> {
        let frozen: Vec<ParamId> = self.frozen_prototypes().into_iter().collect();
        if let Err(e) = self.optimizer.step(&mut self.model.online, &frozen) {
            return Err(match e {
                TensorError::NonFinite(reason) => self.abort(reason),
                other => other.into(),
            });
        }
        self.model.online.apply_running_updates(&pending.updates);
        if let Some((_, _, target)) = self.model.target.as_mut() {
            ema_update(target, &self.model.online, self.config.byol.ema_tau)?;
        }
        if let Some(id) = self.model.prototypes {
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ self.step as u64);
            prototype_renormalize(self.model.online.get_mut(id), &mut rng);
        }
        self.log.entries.push(LogEntry { step: self.step, epoch: self.epoch, loss: pending.loss });
        self.step += 1;
        Ok(())
    }

    /// The trained encoder alone (heads and target dropped).
    pub fn encoder(&self) -> Encoder {
        let mut enc = Encoder::build(self.config.encoder.clone(), self.config.seed).expect("validated config");
        let named: NamedTensors =
            self.model.online.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        enc.load_named(&named).expect("online store holds every encoder tensor");
        enc
    }

    /// Every tensor needed to resume: online parameters and statistics,
    /// target network, optimizer velocities and step/epoch counters.
    pub fn to_named(&self) -> NamedTensors {
        let mut out: NamedTensors = self.model.online.named().map(|(n, t)| (n.to_string(), t.clone())).collect();
        if let Some(target) = self.model.target() {
            out.extend(target.named().map(|(n, t)| (format!("{TARGET_PREFIX}{n}"), t.clone())));
        }
        let store = &self.model.online;
        for id in store.trainable_ids() {
            let v = self.optimizer.velocity(id).to_vec();
            let t = Tensor::new(store.get(id).shape().to_vec(), v).expect("velocity matches shape");
            out.push((format!("{VELOCITY_PREFIX}{}", store.name(id)), t));
        }
        out.push((META_NAME.into(), encode_meta(self.step, self.epoch, self.model.method)));
        out
    }

    pub fn save_checkpoint(&self, path: &Path) -> Result<(), CheckpointError> {
        checkpoint::save(path, &self.to_named())
    }

    /// Rebuilds a trainer from `config` and overwrites its state from a
    /// checkpoint written by [`Trainer::save_checkpoint`].
    pub fn restore(config: TrainConfig, path: &Path) -> Result<Self, TrainError> {
        let tensors = checkpoint::load(path)?;
        let mut trainer = Trainer::new(config)?;
        let (step, epoch, method) = decode_meta(checkpoint::take_tensor(&tensors, META_NAME, &[5])?)?;
        if method != trainer.config.method {
            return Err(CheckpointError::Format(format!(
                "checkpoint was trained with {method}, config asks for {}",
                trainer.config.method
            ))
            .into());
        }
        fill_store(&mut trainer.model.online, &tensors, "")?;
        if let Some((_, _, target)) = trainer.model.target.as_mut() {
            fill_store(target, &tensors, TARGET_PREFIX)?;
        }
        let store = &trainer.model.online;
        for id in store.trainable_ids() {
            let name = format!("{VELOCITY_PREFIX}{}", store.name(id));
            let src = checkpoint::take_tensor(&tensors, &name, store.get(id).shape())?;
            trainer.optimizer.velocity_mut(id).copy_from_slice(src.data());
        }
        trainer.step = step;
        trainer.epoch = epoch;
        Ok(trainer)
    }
}

fn fill_store(store: &mut ParamStore<f32>, tensors: &[(String, Tensor<f32>)], prefix: &str) -> Result<(), CheckpointError> {
    for id in store.ids().collect::<Vec<_>>() {
        let name = format!("{prefix}{}", store.name(id));
        let src = checkpoint::take_tensor(tensors, &name, store.get(id).shape())?;
        store.get_mut(id).data_mut().copy_from_slice(src.data());
    }
    Ok(())
}

// Counters travel bit-cast inside an f32 tensor.
fn encode_meta(step: usize, epoch: usize, method: Method) -> Tensor<f32> {
    let split = |v: usize| [f32::from_bits(v as u64 as u32), f32::from_bits((v as u64 >> 32) as u32)];
    let m = Method::ALL.iter().position(|&x| x == method).expect("known method") as u32;
    let [s0, s1] = split(step);
    let [e0, e1] = split(epoch);
    Tensor::new(vec![5], vec![s0, s1, e0, e1, f32::from_bits(m)]).expect("static shape")
}

fn decode_meta(t: &Tensor<f32>) -> Result<(usize, usize, Method), CheckpointError> {
    let b: Vec<u64> = t.data().iter().map(|v| v.to_bits() as u64).collect();
    let method = *Method::ALL
        .get(b[4] as usize)
        .ok_or_else(|| CheckpointError::Format(format!("unknown method id {}", b[4])))?;
    Ok(((b[0] | b[1] << 32) as usize, (b[2] | b[3] << 32) as usize, method))
}

/// Trains from scratch and returns the encoder and the loss log.
pub fn train(frames: &[Frame], config: TrainConfig) -> Result<(Encoder, TrainLog), TrainError> {
    let mut trainer = Trainer::new(config)?;
    trainer.train(frames)?;
    let encoder = trainer.encoder();
    Ok((encoder, trainer.into_log()))
}
