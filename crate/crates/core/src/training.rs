//! Losses, Adam, the learning-rate schedule and the batch-size-1 training loop.

use alloc::format;
use alloc::vec::Vec;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::network::{forward, volume_to_network, ModelState};
use crate::sample::{Sample, SampleSource};
use crate::tensor::{ParamStore, Scalar, Tape, Tensor, Var};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    /// Last epoch trained at the full rate; the rate then falls linearly to
    /// zero at `epochs`.
    pub decay_start: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub alpha_recon: f64,
    pub alpha_seg: f64,
    /// Also supervise the pre-refinement segmentation output.
    pub deep_supervision: bool,
    /// Start the reconstruction head's bias at the logit of the mean
    /// training intensity instead of 0 (output 0.5).
    pub init_output_bias: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            lr: 2e-3,
            decay_start: 50,
            beta1: 0.5,
            beta2: 0.99,
            eps: 1e-8,
            alpha_recon: 1.0,
            alpha_seg: 1.0,
            deep_supervision: false,
            init_output_bias: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn desk() -> Self {
        TrainConfig {
            epochs: 60,
            decay_start: 30,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.decay_start >= self.epochs {
            return Err(Error::Config(format!(
                "decay_start {} must be smaller than epochs {}",
                self.decay_start, self.epochs
            )));
        }
        if !(self.alpha_recon >= 0.0 && self.alpha_seg >= 0.0) {
            return Err(Error::Config("loss weights must be non-negative".into()));
        }
        if !(self.lr >= 0.0) || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return Err(Error::Config("optimizer hyperparameters out of range".into()));
        }
        Ok(())
    }
}

/// Learning rate of 1-based `epoch`.
pub fn lr_at(epoch: usize, cfg: &TrainConfig) -> Result<f64> {
    if epoch == 0 || epoch > cfg.epochs {
        return Err(Error::invalid("lr_at", format!("epoch {epoch} outside 1..={}", cfg.epochs)));
    }
    if epoch <= cfg.decay_start {
        Ok(cfg.lr)
    } else {
        Ok(cfg.lr * (cfg.epochs - epoch) as f64 / (cfg.epochs - cfg.decay_start) as f64)
    }
}

/// Voxel-mean squared error against a constant target.
pub fn mse_loss<T: Scalar>(tape: &mut Tape<T>, pred: Var, target: &Tensor<T>) -> Result<Var> {
    if tape.shape(pred) != target.shape() {
        return Err(Error::shape("mse_loss", tape.shape(pred), target.shape()));
    }
    let t = tape.constant(target.clone());
    let d = tape.sub(pred, t)?;
    let sq = tape.square(d);
    Ok(tape.mean(sq))
}

/// Voxel-mean binary cross entropy of tumor probabilities against {0,1} labels.
pub fn bce_loss<T: Scalar>(tape: &mut Tape<T>, p: Var, labels: &Tensor<T>) -> Result<Var> {
    if tape.shape(p) != labels.shape() {
        return Err(Error::shape("bce_loss", tape.shape(p), labels.shape()));
    }
    tape.bce(p, labels)
}

#[derive(Debug, Clone, Copy)]
pub struct LossVars {
    pub mse: Var,
    pub bce: Option<Var>,
    pub total: Var,
}

/// `alpha_recon · MSE + alpha_seg · BCE`; the segmentation term is dropped
/// when there is no segmentation output.
pub fn total_loss<T: Scalar>(
    tape: &mut Tape<T>,
    recon: Var,
    target_volume: &Tensor<T>,
    seg_tumor: Option<Var>,
    target_mask: &Tensor<T>,
    alpha_recon: f64,
    alpha_seg: f64,
) -> Result<LossVars> {
    let mse = mse_loss(tape, recon, target_volume)?;
    let weighted = tape.scale(mse, alpha_recon);
    let Some(p) = seg_tumor else {
        return Ok(LossVars {
            mse,
            bce: None,
            total: weighted,
        });
    };
    let bce = bce_loss(tape, p, target_mask)?;
    let wb = tape.scale(bce, alpha_seg);
    let total = tape.add(weighted, wb)?;
    Ok(LossVars {
        mse,
        bce: Some(bce),
        total,
    })
}

/// Bias-corrected Adam update of every parameter; increments the step counter.
pub fn adam_step<T: Scalar>(store: &mut ParamStore<T>, lr: f64, beta1: f64, beta2: f64, eps: f64) -> Result<()> {
    if let Some((name, _)) = store.iter().find(|(_, p)| p.grad.is_none()) {
        return Err(Error::MissingGradient(name.into()));
    }
    let t = store.step() + 1;
    let c1 = 1.0 - libm::pow(beta1, t as f64);
    let c2 = 1.0 - libm::pow(beta2, t as f64);
    for p in store.params_mut() {
        let g = p.grad.as_ref().expect("checked above");
        let values = p.value.data_mut();
        for i in 0..values.len() {
            let gi = g[i].to_f64();
            let m = beta1 * p.m[i].to_f64() + (1.0 - beta1) * gi;
            let v = beta2 * p.v[i].to_f64() + (1.0 - beta2) * gi * gi;
            p.m[i] = T::from_f64(m);
            p.v[i] = T::from_f64(v);
            let update = lr * (m / c1) / (libm::sqrt(v / c2) + eps);
            values[i] = T::from_f64(values[i].to_f64() - update);
        }
    }
    store.set_step(t);
    Ok(())
}

/// Name of the reconstruction head's bias.
pub const RECON_BIAS: &str = "head.recon.b";

/// Sets the reconstruction bias so the untrained network outputs the mean
/// target intensity of `source`.
pub fn init_output_bias<S: SampleSource + ?Sized>(model: &mut ModelState<f32>, source: &S) -> Result<()> {
    let (mut sum, mut count) = (0.0, 0usize);
    for i in 0..source.len() {
        let s = source.sample(i)?;
        sum += s.volume.sum();
        count += s.volume.data.len();
    }
    if count == 0 {
        return Err(Error::Source("cannot initialize from an empty split".into()));
    }
    let mean = (sum / count as f64).clamp(1e-4, 1.0 - 1e-4);
    let p = model
        .params
        .get_mut(RECON_BIAS)
        .ok_or_else(|| Error::UnknownParameter(RECON_BIAS.into()))?;
    p.value.data_mut().iter_mut().for_each(|b| *b = libm::log(mean / (1.0 - mean)) as f32);
    Ok(())
}

/// Network-ready tensors of one sample: `[1,S,S]`, `[1,S,S,S]`, `[1,S,S,S]`,
/// the volumes in network layout (see [`volume_to_network`]).
#[derive(Debug, Clone)]
pub struct SampleTensors<T> {
    pub projection: Tensor<T>,
    pub volume: Tensor<T>,
    pub mask: Tensor<T>,
}

pub fn sample_tensors<T: Scalar>(sample: &Sample, size: usize) -> Result<SampleTensors<T>> {
    let [w, h] = sample.projection.geometry.pixels;
    if w != size || h != size {
        return Err(Error::Source(format!(
            "{}: projection is {w}x{h}, network expects {size}x{size}",
            sample.id
        )));
    }
    if sample.volume.grid.dims != [size; 3] || sample.mask.grid.dims != [size; 3] {
        return Err(Error::Source(format!(
            "{}: targets are {:?}, network expects {size}^3",
            sample.id, sample.volume.grid.dims
        )));
    }
    let conv = |d: &[f32]| d.iter().map(|&v| T::from_f64(v as f64)).collect::<Vec<T>>();
    let mask: Vec<f32> = sample.mask.data.iter().map(|&v| v as f32).collect();
    Ok(SampleTensors {
        projection: Tensor::new(&[1, size, size], conv(&sample.projection.pixels))?,
        volume: Tensor::new(&[1, size, size, size], conv(&volume_to_network(&sample.volume.data, size)))?,
        mask: Tensor::new(&[1, size, size, size], conv(&volume_to_network(&mask, size)))?,
    })
}

/// Scalar loss values of one sample.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct LossValues {
    pub mse: f64,
    pub bce: f64,
    pub total: f64,
}

/// Records forward + loss for one sample on `tape`.
pub fn record_loss<T: Scalar>(
    tape: &mut Tape<T>,
    model: &ModelState<T>,
    t: &SampleTensors<T>,
    cfg: &TrainConfig,
) -> Result<(LossVars, LossValues)> {
    let out = forward(tape, model, &t.projection)?;
    let tumor = match out.seg {
        Some(s) => Some(tape.select_channel(s, 0)?),
        None => None,
    };
    let mut loss = total_loss(tape, out.recon, &t.volume, tumor, &t.mask, cfg.alpha_recon, cfg.alpha_seg)?;
    if cfg.deep_supervision && model.config.enable_ure {
        if let Some(init) = out.seg_initial {
            let p0 = tape.select_channel(init, 0)?;
            let b0 = bce_loss(tape, p0, &t.mask)?;
            let w0 = tape.scale(b0, cfg.alpha_seg);
            loss.total = tape.add(loss.total, w0)?;
        }
    }
    let val = |v: Var| tape.value(v).data()[0].to_f64();
    let values = LossValues {
        mse: val(loss.mse),
        bce: loss.bce.map(val).unwrap_or(0.0),
        total: val(loss.total),
    };
    Ok((loss, values))
}

/// One optimization step: zero grads, forward, loss, backward, Adam.
pub fn train_step(
    model: &mut ModelState<f32>,
    t: &SampleTensors<f32>,
    cfg: &TrainConfig,
    lr: f64,
) -> Result<LossValues> {
    model.params.zero_grad();
    let mut tape = Tape::new();
    let (loss, values) = record_loss(&mut tape, model, t, cfg)?;
    if !values.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            epoch: 0,
            sample: alloc::string::String::new(),
        });
    }
    tape.backward(loss.total)?;
    model.params.accumulate_grads(&tape);
    adam_step(&mut model.params, lr, cfg.beta1, cfg.beta2, cfg.eps)?;
    Ok(values)
}

/// Mean losses over a split; never touches the parameters.
pub fn evaluate_loss<S: SampleSource + ?Sized>(model: &ModelState<f32>, source: &S, cfg: &TrainConfig) -> Result<LossValues> {
    if source.is_empty() {
        return Err(Error::Source("cannot evaluate an empty split".into()));
    }
    let mut acc = LossValues::default();
    for i in 0..source.len() {
        let s = source.sample(i)?;
        let t = sample_tensors(&s, model.config.input_size)?;
        let mut tape = Tape::new();
        let (_, v) = record_loss(&mut tape, model, &t, cfg)?;
        acc.mse += v.mse;
        acc.bce += v.bce;
        acc.total += v.total;
    }
    let n = source.len() as f64;
    Ok(LossValues {
        mse: acc.mse / n,
        bce: acc.bce / n,
        total: acc.total / n,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_mse: f64,
    pub train_bce: f64,
    pub train_total: f64,
    pub val_total: f64,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainLog {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch of the retained model.
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best_val(&self) -> Option<f64> {
        self.records.iter().find(|r| r.epoch == self.best_epoch).map(|r| r.val_total)
    }
}

/// Wall clock and progress reporting supplied by the caller.
pub trait TrainHooks {
    fn now_seconds(&self) -> f64 {
        0.0
    }

    fn on_epoch(&mut self, _record: &EpochRecord) {}
}

/// No clock, no reporting.
pub struct NoHooks;

impl TrainHooks for NoHooks {}

/// Trains for `cfg.epochs` epochs and returns the model with the smallest
/// validation loss together with the per-epoch log.
pub fn train<A, B, H>(
    mut model: ModelState<f32>,
    train_set: &A,
    val_set: &B,
    cfg: &TrainConfig,
    hooks: &mut H,
) -> Result<(ModelState<f32>, TrainLog)>
where
    A: SampleSource + ?Sized,
    B: SampleSource + ?Sized,
    H: TrainHooks + ?Sized,
{
    cfg.validate()?;
    if train_set.is_empty() || val_set.is_empty() {
        return Err(Error::Source("training and validation splits must be nonempty".into()));
    }
    if cfg.init_output_bias {
        init_output_bias(&mut model, train_set)?;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut best = model.clone();
    let mut log = TrainLog::default();
    let mut best_val = f64::INFINITY;
    for epoch in 1..=cfg.epochs {
        let start = hooks.now_seconds();
        let lr = lr_at(epoch, cfg)?;
        order.shuffle(&mut rng);
        let mut acc = LossValues::default();
        for &i in &order {
            let s = train_set.sample(i)?;
            let t = sample_tensors(&s, model.config.input_size)?;
            let v = train_step(&mut model, &t, cfg, lr).map_err(|e| match e {
                Error::NonFiniteLoss { .. } => Error::NonFiniteLoss {
                    epoch,
                    sample: s.id.clone(),
                },
                other => other,
            })?;
            acc.mse += v.mse;
            acc.bce += v.bce;
            acc.total += v.total;
        }
        let n = order.len() as f64;
        let val = evaluate_loss(&model, val_set, cfg)?;
        if !val.total.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                sample: "validation".into(),
            });
        }
        if val.total < best_val {
            best_val = val.total;
            best = model.clone();
            log.best_epoch = epoch;
        }
        let record = EpochRecord {
            epoch,
            lr,
            train_mse: acc.mse / n,
            train_bce: acc.bce / n,
            train_total: acc.total / n,
            val_total: val.total,
            seconds: hooks.now_seconds() - start,
        };
        hooks.on_epoch(&record);
        log.records.push(record);
    }
    Ok((best, log))
}
