//! Loss, optimizer, schedule, training loop and checkpoints.
//!
//! Each step draws the next mini-batch from a per-epoch permutation that
//! depends only on `(seed, epoch)`, so a run restarted from a checkpoint at
//! any step boundary continues exactly as the uninterrupted run would have.

mod adam;
mod checkpoint;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, PoseSample};
use crate::error::{Error, Result};
use crate::metrics::{evaluate, EvalOptions};
use crate::model::Model;
use crate::numerics::{finite_diff_check_floored, GradCheckReport, Graph, Tensor};
use crate::params::Parameterized;

pub use adam::{adam_step, AdamConfig, OptimizerState};
pub use checkpoint::{
    load_checkpoint, save_checkpoint, save_checkpoint_with, Checkpoint, Precision, FORMAT_VERSION,
    MAGIC,
};

/// Stream offset separating dropout draws from shuffle draws.
const DROPOUT_SALT: u64 = 0x5eed_d40f;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr0: f64,
    /// Per-epoch multiplicative decay.
    pub lr_decay: f64,
    pub adam: AdamConfig,
    pub seed: u64,
    /// Stop after this many optimizer steps even mid-epoch.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_steps: Option<u64>,
    /// Samples per forward/backward pass; gradients of a batch's micro-batches
    /// are summed in order, so this bounds memory without changing the maths.
    pub micro_batch: usize,
    /// Drop the root joint from the loss (divisor `J − 1` instead of `J`).
    pub exclude_root: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 128,
            lr0: 2.5e-5,
            lr_decay: 0.98,
            adam: AdamConfig::default(),
            seed: 0,
            max_steps: None,
            micro_batch: 32,
            exclude_root: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if self.batch_size == 0 {
            problems.push("batch_size must be at least 1".to_string());
        }
        if self.micro_batch == 0 {
            problems.push("micro_batch must be at least 1".to_string());
        }
        if !(self.lr_decay > 0.0 && self.lr_decay <= 1.0) {
            problems.push(format!("lr_decay must be in (0, 1], got {}", self.lr_decay));
        }
        if !(self.lr0 > 0.0 && self.lr0.is_finite()) {
            problems.push(format!("lr0 must be positive, got {}", self.lr0));
        }
        if let Err(e) = self.adam.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

/// `lr0 · decay^e`, evaluated by repeated multiplication so that
/// `lr(e + 1) == lr(e) · decay` holds exactly in floating point.
pub fn lr_at_epoch(epoch: usize, cfg: &TrainConfig) -> f64 {
    let mut lr = cfg.lr0;
    for _ in 0..epoch {
        lr *= cfg.lr_decay;
    }
    lr
}

/// Mean over joints of the squared Euclidean distance.
pub fn mse_loss(pred: &Tensor, gt: &Tensor) -> Result<f64> {
    if pred.shape() != gt.shape() || pred.shape().len() != 2 || pred.rows() == 0 {
        return Err(Error::shape("mse_loss", pred.shape(), gt.shape()));
    }
    let total: f64 = pred
        .data()
        .iter()
        .zip(gt.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(total / pred.rows() as f64)
}

/// Where a run stands; enough, with the seed, to continue it exactly.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainProgress {
    /// Epoch currently running (equals `epochs` when finished).
    pub epoch: usize,
    /// Next batch within the epoch.
    pub batch: usize,
    /// Optimizer steps taken.
    pub step: u64,
    /// Sum of batch losses so far this epoch.
    pub epoch_loss_sum: f64,
}

/// One line of the metrics log.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub step: u64,
    pub loss: f64,
    pub val_mpjpe: Option<f64>,
    pub lr: f64,
}

fn check_data(model: &Model, data: &Dataset) -> Result<()> {
    if data.is_empty() {
        return Err(Error::Config("dataset is empty".into()));
    }
    if data.num_joints() != model.num_joints() {
        return Err(Error::Config(format!(
            "dataset has {} joints, model expects {}",
            data.num_joints(),
            model.num_joints()
        )));
    }
    Ok(())
}

fn row_weights(model: &Model, n: usize, exclude_root: bool) -> (Vec<f64>, usize) {
    let j = model.num_joints();
    let root = model.skeleton().root();
    let mut w = Vec::with_capacity(n * j);
    for _ in 0..n {
        for k in 0..j {
            w.push(if exclude_root && k == root { 0.0 } else { 1.0 });
        }
    }
    let per_sample = if exclude_root && j > 1 { j - 1 } else { j };
    (w, per_sample)
}

fn stack(samples: &[&PoseSample]) -> Result<(Tensor, Tensor)> {
    let x: Vec<Tensor> = samples.iter().map(|s| s.pose2d.clone()).collect();
    let y: Vec<Tensor> = samples.iter().map(|s| s.pose3d.clone()).collect();
    Ok((Tensor::concat_rows(&x)?, Tensor::concat_rows(&y)?))
}

/// Batch loss (mean over samples of [`mse_loss`]) and its gradient for every
/// model parameter, in [`Parameterized::params`] order.
pub fn loss_and_gradients(
    model: &Model,
    samples: &[&PoseSample],
    micro_batch: usize,
    exclude_root: bool,
    mut dropout: Option<&mut ChaCha8Rng>,
) -> Result<(f64, Vec<Tensor>)> {
    if samples.is_empty() || micro_batch == 0 {
        return Err(Error::Contract("empty batch".into()));
    }
    let (_, per_sample) = row_weights(model, 0, exclude_root);
    let denom = (samples.len() * per_sample) as f64;
    let mut loss = 0.0;
    let mut grads: Option<Vec<Tensor>> = None;
    for chunk in samples.chunks(micro_batch) {
        let (x, y) = stack(chunk)?;
        let (w, _) = row_weights(model, chunk.len(), exclude_root);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let pred = model.forward_graph(&mut g, xv, dropout.as_deref_mut())?;
        let l = g.mse_loss(pred, y, w, denom)?;
        loss += g.value(l).data()[0];
        let back = g.backward(l)?;
        let chunk_grads = model.collect_gradients(&g, &back);
        match grads.as_mut() {
            None => grads = Some(chunk_grads),
            Some(acc) => {
                for (a, c) in acc.iter_mut().zip(&chunk_grads) {
                    a.add_assign(c)?;
                }
            }
        }
    }
    Ok((loss, grads.expect("at least one micro-batch")))
}

/// Batch loss without gradients or dropout.
pub fn loss_value(model: &Model, samples: &[&PoseSample], exclude_root: bool) -> Result<f64> {
    let (x, y) = stack(samples)?;
    let (w, per_sample) = row_weights(model, samples.len(), exclude_root);
    let mut g = Graph::new();
    let xv = g.constant(x);
    let pred = model.forward_graph(&mut g, xv, None)?;
    let l = g.mse_loss(pred, y, w, (samples.len() * per_sample) as f64)?;
    Ok(g.value(l).data()[0])
}

/// Mean training loss over a whole dataset in inference mode.
pub fn dataset_loss(model: &Model, data: &Dataset, exclude_root: bool) -> Result<f64> {
    check_data(model, data)?;
    let mut total = 0.0;
    for chunk in data.samples.chunks(256) {
        let refs: Vec<&PoseSample> = chunk.iter().collect();
        total += loss_value(model, &refs, exclude_root)? * chunk.len() as f64;
    }
    Ok(total / data.len() as f64)
}

/// Raw model outputs for every sample of `data`, in order. The root joint
/// is left as predicted; see [`Model::predict_poses`] for exported poses.
pub fn predict_dataset(model: &Model, data: &Dataset) -> Result<Vec<Tensor>> {
    check_data(model, data)?;
    let mut out = Vec::with_capacity(data.len());
    for chunk in data.samples.chunks(256) {
        let inputs: Vec<&Tensor> = chunk.iter().map(|s| &s.pose2d).collect();
        out.extend(model.predict_batch(&inputs)?);
    }
    Ok(out)
}

/// MPJPE of the model over `data`.
pub fn dataset_mpjpe(model: &Model, data: &Dataset) -> Result<f64> {
    let preds = predict_dataset(model, data)?;
    let gts: Vec<Tensor> = data.samples.iter().map(|s| s.pose3d.clone()).collect();
    Ok(evaluate(&preds, &gts, None, &EvalOptions::default())?.mpjpe_mm)
}

/// Model, optimizer and progress of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub config: TrainConfig,
    pub optimizer: OptimizerState,
    pub progress: TrainProgress,
}

impl Trainer {
    pub fn new(model: Model, config: TrainConfig) -> Result<Self> {
        config.validate()?;
        let optimizer = OptimizerState::new(model.params().iter().map(|p| &p.value));
        Ok(Trainer {
            model,
            config,
            optimizer,
            progress: TrainProgress::default(),
        })
    }

    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        ckpt.train_config.validate()?;
        let model = ckpt.model()?;
        for (t, m) in model.params().iter().zip(&ckpt.optimizer.m) {
            if t.value.shape() != m.shape() {
                return Err(Error::Checkpoint(
                    "optimizer moments have wrong shapes".into(),
                ));
            }
        }
        Ok(Trainer {
            model,
            config: ckpt.train_config.clone(),
            optimizer: ckpt.optimizer.clone(),
            progress: ckpt.progress.clone(),
        })
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint::from_model(&self.model, &self.config, &self.progress, &self.optimizer)
    }

    pub fn is_finished(&self) -> bool {
        self.progress.epoch >= self.config.epochs
            || self
                .config
                .max_steps
                .is_some_and(|m| self.progress.step >= m)
    }

    /// Sample order for an epoch, fixed by `(seed, epoch)`.
    pub fn epoch_order(&self, n: usize, epoch: usize) -> Vec<usize> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(epoch as u64);
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut rng);
        order
    }

    fn batches_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.config.batch_size)
    }

    /// Run one optimizer step on the next batch; returns the batch loss.
    pub fn step(&mut self, data: &Dataset) -> Result<f64> {
        check_data(&self.model, data)?;
        let n = data.len();
        let order = self.epoch_order(n, self.progress.epoch);
        let bs = self.config.batch_size;
        let start = self.progress.batch * bs;
        if start >= n {
            return Err(Error::Contract(
                "batch cursor past the end of the epoch".into(),
            ));
        }
        let batch: Vec<&PoseSample> = order[start..(start + bs).min(n)]
            .iter()
            .map(|&i| &data.samples[i])
            .collect();

        let mut dropout_rng = (self.model.config().dropout > 0.0).then(|| {
            let mut r = ChaCha8Rng::seed_from_u64(self.config.seed ^ DROPOUT_SALT);
            r.set_stream(self.progress.step);
            r
        });
        let (loss, grads) = loss_and_gradients(
            &self.model,
            &batch,
            self.config.micro_batch,
            self.config.exclude_root,
            dropout_rng.as_mut(),
        )?;
        if !loss.is_finite() {
            return Err(Error::Contract(format!(
                "loss became non-finite at step {}",
                self.progress.step
            )));
        }
        let lr = lr_at_epoch(self.progress.epoch, &self.config);
        let mut params: Vec<&mut Tensor> = self
            .model
            .params_mut()
            .into_iter()
            .map(|p| &mut p.value)
            .collect();
        adam_step(
            &mut params,
            &grads,
            &mut self.optimizer,
            lr,
            &self.config.adam,
        )?;

        self.progress.step += 1;
        self.progress.batch += 1;
        self.progress.epoch_loss_sum += loss;
        Ok(loss)
    }

    /// Train until finished. `on_epoch` runs after every completed epoch
    /// with its log line; returning an error aborts the run.
    pub fn run<F>(
        &mut self,
        train: &Dataset,
        val: Option<&Dataset>,
        mut on_epoch: F,
    ) -> Result<Vec<EpochLog>>
    where
        F: FnMut(&EpochLog, &Trainer) -> Result<()>,
    {
        check_data(&self.model, train)?;
        if let Some(v) = val {
            check_data(&self.model, v)?;
        }
        let per_epoch = self.batches_per_epoch(train.len());
        let mut logs = Vec::new();
        while !self.is_finished() {
            self.step(train)?;
            if self.progress.batch == per_epoch {
                let log = EpochLog {
                    epoch: self.progress.epoch,
                    step: self.progress.step,
                    loss: self.progress.epoch_loss_sum / per_epoch as f64,
                    val_mpjpe: val.map(|v| dataset_mpjpe(&self.model, v)).transpose()?,
                    lr: lr_at_epoch(self.progress.epoch, &self.config),
                };
                self.progress.epoch += 1;
                self.progress.batch = 0;
                self.progress.epoch_loss_sum = 0.0;
                on_epoch(&log, self)?;
                logs.push(log);
            }
        }
        Ok(logs)
    }
}

/// Train `model` on `data` and return the final checkpoint with the log.
pub fn train(
    model: Model,
    data: &Dataset,
    cfg: &TrainConfig,
) -> Result<(Checkpoint, Vec<EpochLog>)> {
    let mut trainer = Trainer::new(model, cfg.clone())?;
    let logs = trainer.run(data, None, |_, _| Ok(()))?;
    Ok((trainer.checkpoint(), logs))
}

/// Overwrite every parameter with uniform noise in `±scale`, so that no
/// gradient is trivially zero because of zero-initialised tensors.
pub fn randomize_params(model: &mut Model, scale: f64, rng: &mut impl Rng) {
    for p in model.params_mut() {
        p.value = Tensor::uniform(p.value.shape(), scale, rng);
    }
}

/// Finite-difference step and relative-error floor for [`check_gradients`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckSettings {
    pub h: f64,
    pub floor: f64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings {
            h: 1e-5,
            floor: 1e-6,
        }
    }
}

/// Compare backpropagated gradients of the batch loss against central
/// differences. `corrupt` perturbs one analytic entry as a negative control.
pub fn check_gradients(
    model: &Model,
    samples: &[&PoseSample],
    exclude_root: bool,
    settings: GradCheckSettings,
    corrupt: bool,
) -> Result<GradCheckReport> {
    let (_, mut grads) = loss_and_gradients(model, samples, samples.len(), exclude_root, None)?;
    if corrupt {
        let g = &mut grads[0].data_mut()[0];
        *g = *g * 1.01 + 1e-3;
    }
    let params = model.param_values();
    let f = |values: &[Tensor]| -> f64 {
        let mut m = model.clone();
        m.set_param_values(values).expect("same parameter layout");
        loss_value(&m, samples, exclude_root).expect("loss of a valid batch")
    };
    Ok(finite_diff_check_floored(
        &f,
        &params,
        &grads,
        settings.h,
        settings.floor,
    ))
}
