//! Two-stage training: VAE on source images, then the segmentation head on
//! VAE reconstructions with the shared encoder frozen.
//!
//! Both stages share one epoch loop with a reduce-on-plateau schedule, early
//! stopping and best-validation restore. The loop can persist its full state
//! after every epoch and resume from it with identical subsequent losses.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use endouda_nn::{Adam, Graph, Module, Optimizer, RmsProp, Tensor};
use ndarray::{Array2, Array4};
use rand::seq::SliceRandom;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::data::{Dataset, ImageTensor};
use crate::edge::sobel_edge_map;
use crate::losses::{kl_gaussian_grad, reconstruction_loss, reconstruction_loss_grad, segmentation_loss_from_logits};
use crate::models::{edge_tensor, Noise, SegModel, VaeModel};
use crate::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Vae,
    Seg,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "kebab-case", deny_unknown_fields)]
pub enum OptimizerConfig {
    Rmsprop { rho: f32, eps: f32 },
    Adam { beta1: f32, beta2: f32, eps: f32 },
}

impl OptimizerConfig {
    fn build(&self, lr: f64) -> Box<dyn Optimizer> {
        match *self {
            OptimizerConfig::Rmsprop { rho, eps } => Box::new(RmsProp::with_params(lr, rho, eps)),
            OptimizerConfig::Adam { beta1, beta2, eps } => Box::new(Adam::with_params(lr, beta1, beta2, eps)),
        }
    }
}

/// What the segmentation stage is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum SegInput {
    /// VAE reconstructions of the source images.
    Reconstruction,
    Raw,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub stage: Stage,
    pub optimizer: OptimizerConfig,
    pub learning_rate: f64,
    pub max_epochs: usize,
    pub batch_size: usize,
    pub plateau_patience: usize,
    pub plateau_factor: f64,
    pub early_stop_patience: usize,
    /// A validation loss counts as an improvement only if it is below the
    /// best so far by more than this.
    pub min_delta: f64,
    pub seed: u64,
    pub beta_kl: f64,
    pub freeze_encoder: bool,
    pub seg_input: SegInput,
}

impl TrainConfig {
    pub fn vae_default() -> Self {
        Self {
            stage: Stage::Vae,
            optimizer: OptimizerConfig::Rmsprop { rho: 0.9, eps: 1e-7 },
            learning_rate: 1e-4,
            max_epochs: 100,
            batch_size: 64,
            plateau_patience: 3,
            plateau_factor: 0.1,
            early_stop_patience: 10,
            min_delta: 1e-6,
            seed: 0,
            beta_kl: 1e-3,
            freeze_encoder: false,
            seg_input: SegInput::Raw,
        }
    }

    pub fn seg_default() -> Self {
        Self {
            stage: Stage::Seg,
            optimizer: OptimizerConfig::Adam {
                beta1: 0.5,
                beta2: 0.999,
                eps: 1e-7,
            },
            learning_rate: 1e-3,
            freeze_encoder: true,
            seg_input: SegInput::Reconstruction,
            beta_kl: 0.0,
            ..Self::vae_default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::config("learning_rate", "must be positive"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::config("plateau_factor", "must lie in (0, 1)"));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::config("patience", "must be positive"));
        }
        if !(self.beta_kl >= 0.0 && self.beta_kl.is_finite()) {
            return Err(Error::config("beta_kl", "must be non-negative"));
        }
        if self.min_delta < 0.0 {
            return Err(Error::config("min_delta", "must be non-negative"));
        }
        Ok(())
    }
}

/// Reduce-on-plateau: after `patience` consecutive epochs without
/// improvement the rate is multiplied by `factor` and the count restarts.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PlateauSchedule {
    pub lr: f64,
    factor: f64,
    patience: usize,
    min_delta: f64,
    best: f64,
    wait: usize,
}

impl PlateauSchedule {
    pub fn new(lr: f64, factor: f64, patience: usize, min_delta: f64) -> Self {
        Self {
            lr,
            factor,
            patience,
            min_delta,
            best: f64::INFINITY,
            wait: 0,
        }
    }

    /// Feeds one validation loss; returns the rate for the next epoch.
    pub fn observe(&mut self, val: f64) -> f64 {
        if val < self.best - self.min_delta {
            self.best = val;
            self.wait = 0;
        } else {
            self.wait += 1;
            if self.wait >= self.patience {
                self.lr *= self.factor;
                self.wait = 0;
            }
        }
        self.lr
    }
}

/// Stops once `patience` epochs have passed since the best epoch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EarlyStopping {
    patience: usize,
    min_delta: f64,
    pub best: f64,
    /// 1-based epoch of the best validation loss.
    pub best_epoch: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
        }
    }

    /// Returns `(improved, stop)` for 1-based `epoch`.
    pub fn observe(&mut self, epoch: usize, val: f64) -> (bool, bool) {
        let improved = val < self.best - self.min_delta;
        if improved {
            self.best = val;
            self.best_epoch = epoch;
        }
        (improved, epoch - self.best_epoch >= self.patience)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StopReason {
    MaxEpochs,
    EarlyStop,
    /// The run was cut short by `TrainOptions::epoch_limit` and can resume.
    Paused,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub wall_time_s: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    pub stop_reason: StopReason,
    pub best_epoch: usize,
}

impl TrainLog {
    /// CSV with columns `epoch,train_loss,val_loss,lr`. Wall time is left
    /// out so reruns produce identical files.
    pub fn write_csv(&self, path: &Path) -> Result<()> {
        let mut w = crate::io::csv_writer(path)?;
        w.write_record(["epoch", "train_loss", "val_loss", "lr"])?;
        for r in &self.records {
            w.write_record([
                r.epoch.to_string(),
                r.train_loss.to_string(),
                r.val_loss.to_string(),
                r.lr.to_string(),
            ])?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    pub fn val_losses(&self) -> Vec<f64> {
        self.records.iter().map(|r| r.val_loss).collect()
    }
}

/// Replays the schedule and stopping rules on a fixed validation trace.
/// Returns the rate used in each epoch and the epoch count actually run.
pub fn simulate_schedule(cfg: &TrainConfig, val_losses: &[f64]) -> (Vec<f64>, usize, StopReason) {
    let mut sched = PlateauSchedule::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta);
    let mut stop = EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta);
    let mut lrs = Vec::new();
    for (i, v) in val_losses.iter().take(cfg.max_epochs).enumerate() {
        lrs.push(sched.lr);
        sched.observe(*v);
        if stop.observe(i + 1, *v).1 {
            return (lrs, i + 1, StopReason::EarlyStop);
        }
    }
    let n = lrs.len();
    (lrs, n, StopReason::MaxEpochs)
}

/// Persistence and interruption controls for one training call.
#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Written after every epoch; read back when `resume` is set.
    pub state_path: Option<PathBuf>,
    pub resume: bool,
    /// Stop after this many total epochs with reason `Paused`.
    pub epoch_limit: Option<usize>,
}

#[derive(Serialize, Deserialize)]
struct LoopState {
    epoch: usize,
    schedule: PlateauSchedule,
    stopping: EarlyStopping,
    log: TrainLog,
}

const STATE_KIND: &str = "train-state";

fn save_state(path: &Path, model: &dyn Module, best: &[(String, Tensor)], opt: &dyn Optimizer, state: &LoopState) -> Result<()> {
    let mut tensors: Vec<(String, Tensor)> = model.named_params().into_iter().map(|(n, t)| (format!("param/{n}"), t)).collect();
    tensors.extend(best.iter().map(|(n, t)| (format!("best/{n}"), t.clone())));
    tensors.extend(opt.state().into_iter().map(|(n, t)| (format!("opt/{n}"), t)));
    Checkpoint {
        kind: STATE_KIND.into(),
        config: serde_json::to_value(state)?,
        tensors,
    }
    .save(path)
}

fn load_state(path: &Path, model: &mut dyn Module, opt: &mut dyn Optimizer) -> Result<(LoopState, Vec<(String, Tensor)>)> {
    let ckpt = Checkpoint::load(path)?;
    if ckpt.kind != STATE_KIND {
        return Err(Error::Checkpoint(format!("{} is not a training-state file", path.display())));
    }
    let state: LoopState = serde_json::from_value(ckpt.config)?;
    let mut params = HashMap::new();
    let mut best = Vec::new();
    let mut opt_state = Vec::new();
    for (name, t) in ckpt.tensors {
        if let Some(n) = name.strip_prefix("param/") {
            params.insert(n.to_string(), t);
        } else if let Some(n) = name.strip_prefix("best/") {
            best.push((n.to_string(), t));
        } else if let Some(n) = name.strip_prefix("opt/") {
            opt_state.push((n.to_string(), t));
        }
    }
    assign_params(model, &params)?;
    opt.load_state(opt_state)?;
    opt.set_learning_rate(state.schedule.lr);
    Ok((state, best))
}

fn assign_params(model: &mut dyn Module, params: &HashMap<String, Tensor>) -> Result<()> {
    let mut missing = None;
    model.visit_mut(&mut |name, t| match params.get(name) {
        Some(src) if src.shape() == t.shape() => t.data_mut().copy_from_slice(src.data()),
        _ => {
            missing.get_or_insert_with(|| name.to_string());
        }
    });
    match missing {
        Some(n) => Err(Error::Checkpoint(format!("parameter {n} missing or misshapen in saved state"))),
        None => Ok(()),
    }
}

/// Per-batch work supplied by each stage.
trait Stepper {
    type Model: Module;
    /// Loss and parameter gradients for one training batch.
    fn train_batch(&mut self, model: &Self::Model, idx: &[usize], epoch: usize, batch: usize) -> Result<(f64, HashMap<String, Tensor>)>;
    fn val_loss(&mut self, model: &Self::Model) -> Result<f64>;
    fn train_len(&self) -> usize;
}

fn run_loop<S: Stepper>(stepper: &mut S, model: &mut S::Model, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainLog> {
    cfg.validate()?;
    let mut opt = cfg.optimizer.build(cfg.learning_rate);
    let (mut state, mut best) = match (&opts.state_path, opts.resume) {
        (Some(p), true) if p.exists() => load_state(p, model, opt.as_mut())?,
        (None, true) => return Err(Error::config("resume", "needs a state path")),
        _ => (
            LoopState {
                epoch: 0,
                schedule: PlateauSchedule::new(cfg.learning_rate, cfg.plateau_factor, cfg.plateau_patience, cfg.min_delta),
                stopping: EarlyStopping::new(cfg.early_stop_patience, cfg.min_delta),
                log: TrainLog {
                    records: Vec::new(),
                    stop_reason: StopReason::MaxEpochs,
                    best_epoch: 0,
                },
            },
            model.named_params(),
        ),
    };
    let n = stepper.train_len();
    let mut stop_reason = StopReason::MaxEpochs;
    while state.epoch < cfg.max_epochs {
        if opts.epoch_limit.is_some_and(|l| state.epoch >= l) {
            stop_reason = StopReason::Paused;
            break;
        }
        let epoch = state.epoch + 1;
        let started = Instant::now();
        let lr = state.schedule.lr;
        opt.set_learning_rate(lr);
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        rng.set_stream(epoch as u64);
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let (loss, grads) = stepper.train_batch(model, idx, epoch, b)?;
            if !loss.is_finite() {
                return Err(Error::NonFinite(format!("training loss is {loss} at epoch {epoch}, batch {b}")));
            }
            opt.step(model, &grads)?;
            total += loss * idx.len() as f64;
        }
        let train_loss = total / n as f64;
        let val_loss = stepper.val_loss(model)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss is {val_loss} at epoch {epoch}")));
        }
        state.schedule.observe(val_loss);
        let (improved, stop) = state.stopping.observe(epoch, val_loss);
        if improved {
            best = model.named_params();
        }
        state.log.records.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            lr,
            wall_time_s: started.elapsed().as_secs_f64(),
        });
        log::info!("epoch {epoch}: train {train_loss:.6} val {val_loss:.6} lr {lr:e}");
        state.epoch = epoch;
        if let Some(p) = &opts.state_path {
            save_state(p, model, &best, opt.as_ref(), &state)?;
        }
        if stop {
            stop_reason = StopReason::EarlyStop;
            break;
        }
    }
    if stop_reason != StopReason::Paused {
        assign_params(model, &best.into_iter().collect())?;
    }
    let mut log = state.log;
    log.stop_reason = stop_reason;
    log.best_epoch = state.stopping.best_epoch;
    Ok(log)
}

fn array4_to_tensor(a: &Array4<f64>) -> Tensor {
    let shape = a.shape().to_vec();
    Tensor::new(&shape, a.iter().map(|v| *v as f32).collect()).expect("consistent shape")
}

fn array2_to_tensor(a: &Array2<f64>) -> Tensor {
    Tensor::new(&[a.nrows(), a.ncols()], a.iter().map(|v| *v as f32).collect()).expect("consistent shape")
}

fn tensor_to_array4(t: &Tensor) -> Array4<f64> {
    let (n, c, h, w) = t.dims4().expect("4-d tensor");
    Array4::from_shape_vec((n, c, h, w), t.data().iter().map(|v| f64::from(*v)).collect()).expect("consistent shape")
}

fn tensor_to_array2(t: &Tensor) -> Array2<f64> {
    let (r, c) = t.dims2().expect("2-d tensor");
    Array2::from_shape_vec((r, c), t.data().iter().map(|v| f64::from(*v)).collect()).expect("consistent shape")
}

fn require_nonempty(d: &Dataset, what: &str) -> Result<()> {
    if d.is_empty() {
        return Err(Error::EmptySplit(format!("{what} split has no images")));
    }
    Ok(())
}

struct VaeStepper {
    train: ImageTensor,
    train_edges: Tensor,
    val: ImageTensor,
    beta_kl: f64,
    seed: u64,
}

impl Stepper for VaeStepper {
    type Model = VaeModel;

    fn train_batch(&mut self, model: &VaeModel, idx: &[usize], epoch: usize, batch: usize) -> Result<(f64, HashMap<String, Tensor>)> {
        let x = self.train.select(idx);
        let xt = x.to_tensor();
        let edges = select_batch(&self.train_edges, idx);
        let mut g = Graph::new();
        let xi = g.input(xt);
        let ei = g.input(edges);
        let enc = model.encode_graph(&mut g, xi)?;
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x5eed_0000);
        rng.set_stream(((epoch as u64) << 32) | batch as u64);
        let eps = Tensor::randn(g.value(enc.mu).shape(), 1.0, &mut rng);
        let eps = g.input(eps);
        let half = g.scale(enc.logvar, 0.5);
        let sigma = g.exp(half);
        let noise = g.mul(sigma, eps)?;
        let z = g.add(enc.mu, noise)?;
        let y = model.decode_graph(&mut g, z, ei)?;
        let target = x.to_f64();
        let rec = reconstruction_loss_grad(target.view(), tensor_to_array4(g.value(y)).view())?;
        let mut loss = rec.value;
        let mut seeds = vec![(y, array4_to_tensor(&rec.grad))];
        if self.beta_kl > 0.0 {
            let (kl, dmu, dlv) = kl_gaussian_grad(
                tensor_to_array2(g.value(enc.mu)).view(),
                tensor_to_array2(g.value(enc.logvar)).view(),
            )?;
            loss += self.beta_kl * kl;
            seeds.push((enc.mu, array2_to_tensor(&(dmu * self.beta_kl))));
            seeds.push((enc.logvar, array2_to_tensor(&(dlv * self.beta_kl))));
        }
        Ok((loss, g.backward(seeds)?.param_grads()))
    }

    /// Reconstruction loss with z = mu, so validation is noise-free.
    fn val_loss(&mut self, model: &VaeModel) -> Result<f64> {
        let recon = reconstruct(model, &self.val)?;
        reconstruction_loss(self.val.to_f64().view(), recon.to_f64().view())
    }

    fn train_len(&self) -> usize {
        self.train.batch()
    }
}

fn select_batch(t: &Tensor, idx: &[usize]) -> Tensor {
    let parts: Vec<Tensor> = idx.iter().map(|i| t.narrow_batch(*i, 1).expect("index in range")).collect();
    Tensor::stack_batch(&parts).expect("same shapes")
}

/// Deterministic reconstruction `decode(mu(x), sobel(x))` in signed range.
pub fn reconstruct(model: &VaeModel, x: &ImageTensor) -> Result<ImageTensor> {
    let code = model.encode(x, Noise::Zero)?;
    model.decode(&code.mu, &sobel_edge_map(x))
}

/// Trains the VAE on the source train split, validating on `val`.
pub fn train_vae(model: &mut VaeModel, train: &Dataset, val: &Dataset, cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainLog> {
    if cfg.stage != Stage::Vae {
        return Err(Error::config("stage", "train_vae needs stage = vae"));
    }
    require_nonempty(train, "train")?;
    require_nonempty(val, "validation")?;
    let train_images = train.all_images()?.to_signed();
    let train_edges = edge_tensor(&sobel_edge_map(&train_images));
    let mut stepper = VaeStepper {
        train: train_images,
        train_edges,
        val: val.all_images()?.to_signed(),
        beta_kl: cfg.beta_kl,
        seed: cfg.seed,
    };
    run_loop(&mut stepper, model, cfg, opts)
}

struct SegStepper {
    train: ImageTensor,
    train_masks: Array4<f64>,
    val: ImageTensor,
    val_masks: Array4<f64>,
    freeze_encoder: bool,
}

impl SegStepper {
    fn graph(&self) -> Graph {
        let mut g = Graph::new();
        if self.freeze_encoder {
            g.freeze("encoder.");
        }
        g
    }
}

impl Stepper for SegStepper {
    type Model = SegModel;

    fn train_batch(&mut self, model: &SegModel, idx: &[usize], _: usize, _: usize) -> Result<(f64, HashMap<String, Tensor>)> {
        let mut g = self.graph();
        let xi = g.input(self.train.select(idx).to_tensor());
        let logits = model.logits_graph(&mut g, xi)?;
        let masks = self.train_masks.select(ndarray::Axis(0), idx);
        let l = segmentation_loss_from_logits(tensor_to_array4(g.value(logits)).view(), masks.view())?;
        Ok((l.value, g.backward(vec![(logits, array4_to_tensor(&l.grad))])?.param_grads()))
    }

    fn val_loss(&mut self, model: &SegModel) -> Result<f64> {
        seg_loss(model, &self.val, &self.val_masks)
    }

    fn train_len(&self) -> usize {
        self.train.batch()
    }
}

/// Combined BCE + Dice loss of `model` over a whole set, evaluated in chunks
/// and pooled the same way as a single batch.
fn seg_loss(model: &SegModel, x: &ImageTensor, masks: &Array4<f64>) -> Result<f64> {
    let logits = model.logits(x)?.mapv(f64::from);
    Ok(segmentation_loss_from_logits(logits.view(), masks.view())?.value)
}

/// Images fed to the segmentation stage for `cfg.seg_input`.
pub fn seg_inputs(dataset: &Dataset, vae: Option<&VaeModel>, input: SegInput) -> Result<ImageTensor> {
    let x = dataset.all_images()?.to_signed();
    match (input, vae) {
        (SegInput::Raw, _) => Ok(x),
        (SegInput::Reconstruction, Some(v)) => reconstruct(v, &x),
        (SegInput::Reconstruction, None) => Err(Error::Dependency(
            "segmentation on reconstructions needs a trained VAE".into(),
        )),
    }
}

/// Trains `seg` on `train`, validating on `val`. With
/// `SegInput::Reconstruction` both splits are first passed through `vae`.
pub fn train_segmentation(
    seg: &mut SegModel,
    vae: Option<&VaeModel>,
    train: &Dataset,
    val: &Dataset,
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainLog> {
    if cfg.stage != Stage::Seg {
        return Err(Error::config("stage", "train_segmentation needs stage = seg"));
    }
    require_nonempty(train, "train")?;
    require_nonempty(val, "validation")?;
    let mut stepper = SegStepper {
        train: seg_inputs(train, vae, cfg.seg_input)?,
        train_masks: train.all_masks()?.to_f64(),
        val: seg_inputs(val, vae, cfg.seg_input)?,
        val_masks: val.all_masks()?.to_f64(),
        freeze_encoder: cfg.freeze_encoder,
    };
    run_loop(&mut stepper, seg, cfg, opts)
}
