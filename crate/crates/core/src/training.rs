//! Eq. 11 L1 objective and the §5.1 recipe: Adam, per-step cosine learning
//! rate, global-norm gradient clipping, with SAP window sampling.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{lrms_offset_step, SamplePair};
use crate::error::{Error, Result};
use crate::model::{forward, Bound, ModelConfig, ModelParams};
use crate::patchify::{crop_index, BucketSampler, SamplerMode};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Optimisation hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    /// Optimisation steps per epoch; `None` means one pass over the dataset.
    pub steps_per_epoch: Option<usize>,
    /// Square PAN-resolution training crop.
    pub crop: usize,
    pub lr_init: f64,
    pub lr_final: f64,
    pub clip_norm: f64,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    pub buckets: Vec<usize>,
    /// Per-bucket probabilities; uniform when `None`.
    pub bucket_probs: Option<Vec<f64>>,
    /// Inference window, also the static training window when SAP is off.
    pub infer_window: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 60,
            batch_size: 4,
            steps_per_epoch: None,
            crop: 64,
            lr_init: 5e-4,
            lr_final: 5e-8,
            clip_norm: 4.0,
            adam_beta1: 0.9,
            adam_beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            buckets: vec![8, 16, 32],
            bucket_probs: None,
            infer_window: 16,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if !(self.lr_init > self.lr_final && self.lr_final > 0.0) {
            return bad(format!(
                "need lr_init ({}) > lr_final ({}) > 0",
                self.lr_init, self.lr_final
            ));
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm must be positive".into());
        }
        if self.epochs == 0 || self.batch_size == 0 || self.steps_per_epoch == Some(0) {
            return bad("epochs, batch_size and steps_per_epoch must be positive".into());
        }
        if !(0.0..1.0).contains(&self.adam_beta1) || !(0.0..1.0).contains(&self.adam_beta2) || !(self.adam_eps > 0.0)
        {
            return bad("Adam betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.buckets.iter().chain([&self.infer_window]).any(|&b| b == 0 || self.crop % b != 0) {
            return bad(format!(
                "crop {} must be divisible by every bucket {:?} and the inference window {}",
                self.crop, self.buckets, self.infer_window
            ));
        }
        Ok(())
    }

    /// The window sampler for training under `model`'s SAP setting.
    pub fn sampler(&self, model: &ModelConfig) -> Result<BucketSampler> {
        let seed = self.seed ^ 0x5A9_5A9;
        if !model.use_sap {
            return BucketSampler::fixed(self.infer_window, seed);
        }
        let n = self.buckets.len().max(1);
        let probs = self.bucket_probs.clone().unwrap_or_else(|| vec![1.0 / n as f64; n]);
        BucketSampler::new(self.buckets.clone(), probs, seed, SamplerMode::Train, self.infer_window)
    }
}

/// Eq. 11 with mean reduction, recorded on the tape.
pub fn l1_loss<E: Scalar>(tape: &Tape<E>, h_out: &Var<E>, g: &Tensor<E>) -> Result<Var<E>> {
    tape.l1_loss(h_out, g)
}

/// Plain-value mean absolute difference.
pub fn l1_value<E: Scalar>(h_out: &Tensor<E>, g: &Tensor<E>) -> Result<f64> {
    if h_out.shape() != g.shape() {
        return Err(Error::shape(h_out.shape(), g.shape()));
    }
    let total: f64 = h_out
        .data()
        .iter()
        .zip(g.data())
        .map(|(&a, &b)| (a - b).abs().as_f64())
        .sum();
    Ok(total / g.numel() as f64)
}

/// `lr_final + ½(lr_init − lr_final)(1 + cos(π·step/total))`, with both
/// endpoints returned exactly.
pub fn cosine_lr(step: usize, total_steps: usize, lr_init: f64, lr_final: f64) -> Result<f64> {
    if step > total_steps {
        return Err(Error::InvalidArgument(format!(
            "step {step} beyond schedule length {total_steps}"
        )));
    }
    if step == 0 {
        return Ok(lr_init);
    }
    if step == total_steps {
        return Ok(lr_final);
    }
    let t = step as f64 / total_steps as f64;
    Ok(lr_final + 0.5 * (lr_init - lr_final) * (1.0 + (PI * t).cos()))
}

pub fn global_norm<E: Scalar>(grads: &BTreeMap<String, Tensor<E>>) -> f64 {
    grads
        .values()
        .flat_map(|g| g.data().iter())
        .map(|&v| v.as_f64() * v.as_f64())
        .sum::<f64>()
        .sqrt()
}

/// Scales every gradient by `max_norm / norm` when the global L2 norm exceeds
/// `max_norm`; returns the scale applied (1 when untouched).
pub fn clip_gradients<E: Scalar>(grads: &mut BTreeMap<String, Tensor<E>>, max_norm: f64) -> f64 {
    let norm = global_norm(grads);
    if !(norm > max_norm) {
        return 1.0;
    }
    let scale = max_norm / norm;
    for g in grads.values_mut() {
        for v in g.data_mut() {
            *v = E::lit(v.as_f64() * scale);
        }
    }
    scale
}

/// Adam moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: BTreeMap<String, Tensor>,
    pub v: BTreeMap<String, Tensor>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(params: &ModelParams) -> Self {
        Self::for_tensors(params.iter())
    }

    /// Zeroed moments mirroring the given named tensors.
    pub fn for_tensors<'a>(tensors: impl Iterator<Item = (&'a String, &'a Tensor)>) -> Self {
        let zeros: BTreeMap<String, Tensor> = tensors
            .map(|(k, t)| (k.clone(), Tensor::zeros(t.shape().to_vec())))
            .collect();
        Self {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// Hyperparameters of one Adam update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl From<&TrainConfig> for AdamConfig {
    fn from(c: &TrainConfig) -> Self {
        Self {
            beta1: c.adam_beta1,
            beta2: c.adam_beta2,
            eps: c.adam_eps,
        }
    }
}

impl Default for AdamConfig {
    fn default() -> Self {
        (&TrainConfig::default()).into()
    }
}

/// Bias-corrected Adam update of every model parameter.
pub fn adam_step(
    params: &mut ModelParams,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    adam_update(params.map_mut(), grads, state, lr, cfg)
}

/// Bias-corrected Adam update of an arbitrary named tensor set. Moments and
/// the update are computed in f64 per element. Fails without touching
/// anything when a gradient or moment is missing or has drifted in shape.
pub fn adam_update(
    params: &mut BTreeMap<String, Tensor>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    cfg: AdamConfig,
) -> Result<()> {
    for (name, p) in params.iter() {
        let drift = |t: Option<&Tensor>, what: &str| -> Result<()> {
            let t = t.ok_or_else(|| Error::MissingTensor(format!("{what} for {name}")))?;
            if t.shape() != p.shape() {
                return Err(Error::TensorShape {
                    name: format!("{what} for {name}"),
                    expected: p.shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Ok(())
        };
        drift(grads.get(name), "gradient")?;
        drift(state.m.get(name), "first moment")?;
        drift(state.v.get(name), "second moment")?;
    }
    state.step += 1;
    let t = state.step as i32;
    let (c1, c2) = (1.0 - cfg.beta1.powi(t), 1.0 - cfg.beta2.powi(t));
    for (name, p) in params.iter_mut() {
        let g = &grads[name];
        let m = state.m.get_mut(name).expect("checked");
        let v = state.v.get_mut(name).expect("checked");
        for (((w, &gi), mi), vi) in p
            .data_mut()
            .iter_mut()
            .zip(g.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let gi = gi as f64;
            let m_new = cfg.beta1 * *mi as f64 + (1.0 - cfg.beta1) * gi;
            let v_new = cfg.beta2 * *vi as f64 + (1.0 - cfg.beta2) * gi * gi;
            *mi = m_new as f32;
            *vi = v_new as f32;
            let update = lr * (m_new / c1) / ((v_new / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

/// One line of the training log.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Window size → number of steps that used it.
    pub windows: BTreeMap<usize, usize>,
}

impl EpochLog {
    /// `epoch=3 loss=0.012345 lr=4.9e-4 windows=8:3,16:2,32:3`
    pub fn to_line(&self) -> String {
        let mut hist = String::new();
        for (i, (w, n)) in self.windows.iter().enumerate() {
            if i > 0 {
                hist.push(',');
            }
            let _ = write!(hist, "{w}:{n}");
        }
        format!(
            "epoch={} loss={:.8} lr={:.6e} windows={}",
            self.epoch, self.mean_loss, self.lr, hist
        )
    }
}

/// Everything [`train`] produces.
#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub params: ModelParams,
    pub state: OptimizerState,
    pub epochs: Vec<EpochLog>,
    /// Loss of every optimisation step, in order.
    pub step_losses: Vec<f32>,
    /// Window histogram over the whole run.
    pub windows: BTreeMap<usize, usize>,
}

/// Top-left-aligned crop of a `[C, H, W]` tensor.
fn crop3(t: &Tensor, top: usize, left: usize, h: usize, w: usize) -> Result<Vec<f32>> {
    let (c, hh, ww) = (t.shape()[0], t.shape()[1], t.shape()[2]);
    let index = crop_index(&[1, c, hh, ww], top, left, h, w)?;
    Ok(index.iter().map(|&i| t.data()[i]).collect())
}

/// A batch of aligned random crops.
struct Batch {
    pan: Tensor,
    lrms: Tensor,
    gt: Tensor,
}

fn sample_batch(
    dataset: &[SamplePair],
    indices: &[usize],
    crop: usize,
    ratio: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Batch> {
    let crop_ms = (crop as f64 / ratio).round() as usize;
    let step = lrms_offset_step(ratio);
    let (mut pan, mut lrms, mut gt) = (Vec::new(), Vec::new(), Vec::new());
    for &i in indices {
        let pair = &dataset[i];
        let (lh, lw) = (pair.lrms.shape()[1], pair.lrms.shape()[2]);
        let slots_y = (lh - crop_ms) / step + 1;
        let slots_x = (lw - crop_ms) / step + 1;
        let oy = rng.random_range(0..slots_y) * step;
        let ox = rng.random_range(0..slots_x) * step;
        let (py, px) = ((oy as f64 * ratio).round() as usize, (ox as f64 * ratio).round() as usize);
        pan.extend(crop3(&pair.pan, py, px, crop, crop)?);
        lrms.extend(crop3(&pair.lrms, oy, ox, crop_ms, crop_ms)?);
        gt.extend(crop3(pair.gt.as_ref().expect("validated"), py, px, crop, crop)?);
    }
    let b = indices.len();
    let c = dataset[0].bands();
    Ok(Batch {
        pan: Tensor::new(vec![b, 1, crop, crop], pan)?,
        lrms: Tensor::new(vec![b, c, crop_ms, crop_ms], lrms)?,
        gt: Tensor::new(vec![b, c, crop, crop], gt)?,
    })
}

fn check_dataset(dataset: &[SamplePair], tcfg: &TrainConfig, mcfg: &ModelConfig) -> Result<f64> {
    let first = dataset
        .first()
        .ok_or_else(|| Error::InvalidArgument("training set is empty".into()))?;
    let ratio = first.ratio;
    let crop_ms = tcfg.crop as f64 / ratio;
    if (crop_ms - crop_ms.round()).abs() > 1e-9 {
        return Err(Error::InvalidConfig(format!(
            "crop {} is not a whole number of LRMS pixels at ratio {ratio}",
            tcfg.crop
        )));
    }
    for pair in dataset {
        pair.validate()?;
        if pair.gt.is_none() {
            return Err(Error::InvalidArgument(format!("training sample {} has no ground truth", pair.id)));
        }
        if pair.ratio != ratio {
            return Err(Error::InvalidArgument(format!(
                "training sample {} has ratio {} but the set uses {ratio}",
                pair.id, pair.ratio
            )));
        }
        if pair.bands() != mcfg.ms_bands {
            return Err(Error::InvalidArgument(format!(
                "training sample {} has {} bands, model expects {}",
                pair.id,
                pair.bands(),
                mcfg.ms_bands
            )));
        }
        let (h, w) = pair.extent();
        if h < tcfg.crop || w < tcfg.crop {
            return Err(Error::InvalidArgument(format!(
                "training sample {} ({h}x{w}) is smaller than the {} crop",
                pair.id, tcfg.crop
            )));
        }
    }
    Ok(ratio)
}

/// Runs the full optimisation. `on_epoch` sees each log record as it is made.
pub fn train(
    params: ModelParams,
    dataset: &[SamplePair],
    tcfg: &TrainConfig,
    mcfg: &ModelConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<TrainOutcome> {
    tcfg.validate()?;
    params.check(mcfg)?;
    let ratio = check_dataset(dataset, tcfg, mcfg)?;
    let mut sampler = tcfg.sampler(mcfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(tcfg.seed);
    let steps_per_epoch = tcfg
        .steps_per_epoch
        .unwrap_or_else(|| dataset.len().div_ceil(tcfg.batch_size));
    let total = tcfg.epochs * steps_per_epoch;
    let adam = AdamConfig::from(tcfg);

    let mut params = params;
    let mut state = OptimizerState::new(&params);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut outcome_epochs = Vec::with_capacity(tcfg.epochs);
    let mut step_losses = Vec::with_capacity(total);
    let mut all_windows = BTreeMap::new();
    let mut step = 0;
    for epoch in 1..=tcfg.epochs {
        let mut windows = BTreeMap::new();
        let mut loss_sum = 0.0;
        let mut lr = tcfg.lr_init;
        for _ in 0..steps_per_epoch {
            let mut indices = Vec::with_capacity(tcfg.batch_size);
            while indices.len() < tcfg.batch_size {
                if cursor == order.len() {
                    order = (0..dataset.len()).collect();
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                indices.push(order[cursor]);
                cursor += 1;
            }
            let window = sampler.sample_window();
            *windows.entry(window).or_insert(0) += 1;
            let batch = sample_batch(dataset, &indices, tcfg.crop, ratio, &mut rng)?;

            let tape = Tape::new();
            let vars = Bound::new(&tape, &params, true);
            let out = forward(&tape, &vars, &batch.pan, &batch.lrms, ratio, mcfg, window)?;
            let loss = l1_loss(&tape, &out, &batch.gt)?;
            let value = loss.value().item();
            if !value.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    value: value as f64,
                });
            }
            tape.backward(&loss)?;
            let mut grads = vars.grads();
            drop(tape);
            clip_gradients(&mut grads, tcfg.clip_norm);
            lr = cosine_lr(step, total.saturating_sub(1), tcfg.lr_init, tcfg.lr_final)?;
            adam_step(&mut params, &grads, &mut state, lr, adam)?;
            loss_sum += value as f64;
            step_losses.push(value);
            step += 1;
        }
        for (w, n) in &windows {
            *all_windows.entry(*w).or_insert(0) += n;
        }
        let record = EpochLog {
            epoch,
            mean_loss: loss_sum / steps_per_epoch as f64,
            lr,
            windows,
        };
        on_epoch(&record);
        outcome_epochs.push(record);
    }
    Ok(TrainOutcome {
        params,
        state,
        epochs: outcome_epochs,
        step_losses,
        windows: all_windows,
    })
}
