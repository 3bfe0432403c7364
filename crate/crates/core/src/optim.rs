//! Two-stage training.
//!
//! Stage A fits encoder and decoder on plain MAE. Stage B freezes the encoder,
//! initializes the fusion layers and fine-tunes decoder and fusion on the
//! joint loss with AdamW and an epoch-level cosine schedule.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::WindowSample;
use crate::error::{F2aError, Result};
use crate::forecaster::{forecaster_backward, Embedding, ExternalSet, ForecasterParams};
use crate::fusion::{f2a_backward, forward_from_base, FusionParams};
use crate::loss::{joint_loss, joint_loss_grad, weighted_mae, weighted_mae_grad, LossConfig};
use crate::model::{Model, ModelDims, ModelGrads, ENCODER_PARAMS, PARAM_NAMES};
use crate::retrieval::{RetrievalStore, RetrievedSet};

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub lr_max: f64,
    pub lr_min: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub pretrain_epochs: usize,
    pub seed: u64,
    /// Drop a training window's own record from its retrieval results.
    pub exclude_self: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_max: 1e-3,
            lr_min: 0.0,
            epochs: 50,
            batch_size: 256,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.01,
            pretrain_epochs: 10,
            seed: 0,
            exclude_self: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(F2aError::Config(m));
        if !(self.lr_max > self.lr_min && self.lr_min >= 0.0) {
            return fail(format!(
                "train.lr_max = {} must exceed train.lr_min = {} >= 0",
                self.lr_max, self.lr_min
            ));
        }
        if self.epochs == 0 {
            return fail("train.epochs must be at least 1".into());
        }
        if self.batch_size == 0 {
            return fail("train.batch_size must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return fail(format!("train.beta1/beta2 = {}/{} must lie in [0, 1)", self.beta1, self.beta2));
        }
        if self.eps.is_nan() || self.eps <= 0.0 || self.weight_decay.is_nan() || self.weight_decay < 0.0 {
            return fail("train.eps must be > 0 and train.weight_decay >= 0".into());
        }
        Ok(())
    }
}

/// Cosine annealing from `lr_max` at epoch 0 to `lr_min` at `epochs`.
pub fn cosine_lr(epoch: usize, epochs: usize, lr_max: f64, lr_min: f64) -> Result<f64> {
    if epoch > epochs || epochs == 0 {
        return Err(F2aError::InvalidArgument {
            arg: "epoch",
            reason: format!("epoch {epoch} outside 0..={epochs}"),
        });
    }
    let frac = epoch as f64 / epochs as f64;
    Ok(lr_min + 0.5 * (lr_max - lr_min) * (1.0 + (std::f64::consts::PI * frac).cos()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step: u64,
}

impl OptimizerState {
    pub fn new(model: &Model) -> Self {
        let zeros: Vec<Vec<f64>> = model.tensors().iter().map(|t| vec![0.0; t.len()]).collect();
        OptimizerState {
            m: zeros.clone(),
            v: zeros,
            step: 0,
        }
    }
}

/// One AdamW update of a single tensor at 1-based step `step`.
#[allow(clippy::too_many_arguments)]
pub fn adamw_update(
    param: &mut [f64],
    grad: &[f64],
    m: &mut [f64],
    v: &mut [f64],
    step: u64,
    lr: f64,
    cfg: &TrainConfig,
) {
    let bc1 = 1.0 - cfg.beta1.powf(step as f64);
    let bc2 = 1.0 - cfg.beta2.powf(step as f64);
    for i in 0..param.len() {
        let g = grad[i];
        m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g;
        v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g * g;
        let m_hat = m[i] / bc1;
        let v_hat = v[i] / bc2;
        param[i] -= lr * m_hat / (v_hat.sqrt() + cfg.eps) + lr * cfg.weight_decay * param[i];
    }
}

/// Applies AdamW to every tensor flagged in `trainable`; others are left untouched.
pub fn optimizer_step(
    model: &mut Model,
    grads: &ModelGrads,
    state: &mut OptimizerState,
    lr: f64,
    cfg: &TrainConfig,
    trainable: [bool; 8],
) -> Result<()> {
    for (i, g) in grads.tensors.iter().enumerate() {
        if !trainable[i] {
            continue;
        }
        if let Some(index) = g.iter().position(|v| !v.is_finite()) {
            return Err(F2aError::NonFiniteGradient {
                param: PARAM_NAMES[i],
                index,
            });
        }
    }
    state.step += 1;
    for (i, param) in model.tensors_mut().into_iter().enumerate() {
        if trainable[i] {
            adamw_update(param, &grads.tensors[i], &mut state.m[i], &mut state.v[i], state.step, lr, cfg);
        }
    }
    Ok(())
}

/// Where the base embedding and forecast for a window come from.
#[derive(Debug, Clone, Copy)]
pub enum BaseSource<'a> {
    BuiltIn,
    External(&'a ExternalSet),
}

impl BaseSource<'_> {
    pub fn embedding(&self, w: &WindowSample, f: &ForecasterParams) -> Result<Embedding> {
        match self {
            BaseSource::BuiltIn => f.encode(w.x.view()),
            BaseSource::External(set) => Ok(lookup(set, w)?.embedding.clone()),
        }
    }

    pub fn forecast(&self, w: &WindowSample, e: &Embedding, f: &ForecasterParams) -> Result<Array2<f64>> {
        match self {
            BaseSource::BuiltIn => f.decode(e),
            BaseSource::External(set) => Ok(lookup(set, w)?.forecast.clone()),
        }
    }

    pub fn is_external(&self) -> bool {
        matches!(self, BaseSource::External(_))
    }
}

fn lookup<'s>(set: &'s ExternalSet, w: &WindowSample) -> Result<&'s crate::forecaster::ExternalRecord> {
    set.get(&w.origin).ok_or_else(|| F2aError::Retrieval(format!(
        "interchange file has no window ({}, {})",
        w.origin.series, w.origin.start
    )))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub lr: f64,
    pub total: f64,
    pub ap: f64,
    pub forecast: f64,
}

impl EpochLog {
    pub fn line(&self) -> String {
        format!("{}, {}, {}, {}, {}", self.epoch, self.lr, self.total, self.ap, self.forecast)
    }
}

/// Stage A: fits encoder and decoder on unweighted MAE. Returns the per-epoch mean loss.
pub fn pretrain(model: &mut Model, windows: &[WindowSample], cfg: &TrainConfig, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    if windows.is_empty() {
        return Err(F2aError::InvalidArgument {
            arg: "windows",
            reason: "no training windows".into(),
        });
    }
    let mut state = OptimizerState::new(model);
    let trainable = [true, true, true, true, false, false, false, false];
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut losses = Vec::with_capacity(cfg.pretrain_epochs);
    for epoch in 0..cfg.pretrain_epochs {
        let lr = cosine_lr(epoch, cfg.pretrain_epochs, cfg.lr_max, cfg.lr_min)?;
        order.shuffle(rng);
        let mut epoch_loss = 0.0;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = ModelGrads::zeros(model);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let w = &windows[i];
                let f = &model.forecaster;
                let e = f.encode(w.x.view())?;
                let x_hat = f.decode(&e)?;
                let loss = weighted_mae(x_hat.view(), w.z.view(), &w.y, 1.0)?;
                if !loss.is_finite() {
                    return Err(F2aError::NonFiniteLoss { epoch: epoch + 1, batch: b });
                }
                epoch_loss += loss;
                let d = weighted_mae_grad(x_hat.view(), w.z.view(), &w.y, 1.0)?;
                grads.add_forecaster(&forecaster_backward(w.x.view(), &e, d.view(), f), scale);
            }
            optimizer_step(model, &grads, &mut state, lr, cfg, trainable)?;
        }
        losses.push(epoch_loss / windows.len() as f64);
    }
    Ok(losses)
}

/// Per-window inputs that stay fixed through Stage B.
struct Prepared {
    embedding: Embedding,
    external_forecast: Option<Array2<f64>>,
    retrieved: Option<RetrievedSet>,
}

fn prepare(
    windows: &[WindowSample],
    model: &Model,
    base: BaseSource,
    store: Option<&RetrievalStore>,
    exclude_self: bool,
) -> Result<Vec<Prepared>> {
    let k = model.dims.k;
    windows
        .iter()
        .map(|w| {
            let embedding = base.embedding(w, &model.forecaster)?;
            let external_forecast = match base {
                BaseSource::External(_) => Some(base.forecast(w, &embedding, &model.forecaster)?),
                BaseSource::BuiltIn => None,
            };
            let retrieved = if k == 0 {
                None
            } else {
                let store = store.ok_or_else(|| F2aError::Retrieval(format!("k = {k} but no store")))?;
                Some(if exclude_self {
                    store.query_excluding(&embedding, k, |o| *o == w.origin)?
                } else {
                    store.query(&embedding, k)?
                })
            };
            Ok(Prepared {
                embedding,
                external_forecast,
                retrieved,
            })
        })
        .collect()
}

/// Stage B: freezes the encoder, initializes fusion and fine-tunes on the joint loss.
pub fn finetune(
    model: &mut Model,
    windows: &[WindowSample],
    store: Option<&RetrievalStore>,
    base: BaseSource,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<EpochLog>> {
    if windows.is_empty() {
        return Err(F2aError::InvalidArgument {
            arg: "windows",
            reason: "no training windows".into(),
        });
    }
    model.forecaster.encoder_frozen = true;
    let frozen_sum = model.forecaster.encoder_checksum();
    let prepared = prepare(windows, model, base, store, cfg.exclude_self)?;
    model.fusion = FusionParams::init(model.dims.horizon, model.dims.channels, rng);

    let train_decoder = !base.is_external();
    let mut trainable = [true; 8];
    for i in ENCODER_PARAMS {
        trainable[i] = false;
    }
    trainable[2] = train_decoder;
    trainable[3] = train_decoder;

    let mut state = OptimizerState::new(model);
    let mut order: Vec<usize> = (0..windows.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let lr = cosine_lr(epoch, cfg.epochs, cfg.lr_max, cfg.lr_min)?;
        order.shuffle(rng);
        let (mut tot, mut ap, mut fc) = (0.0, 0.0, 0.0);
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut grads = ModelGrads::zeros(model);
            let scale = 1.0 / batch.len() as f64;
            for &i in batch {
                let (w, prep) = (&windows[i], &prepared[i]);
                let x_hat = match &prep.external_forecast {
                    Some(f) => f.clone(),
                    None => model.forecaster.decode(&prep.embedding)?,
                };
                let trace = forward_from_base(prep.embedding.clone(), x_hat, prep.retrieved.as_ref(), &model.fusion)?;
                let parts = joint_loss(&trace, w.z.view(), &w.y, loss_cfg)?;
                if !parts.total.is_finite() {
                    return Err(F2aError::NonFiniteLoss { epoch: epoch + 1, batch: b });
                }
                tot += parts.total;
                ap += parts.ap;
                fc += parts.forecast;
                let up = joint_loss_grad(&trace, w.z.view(), &w.y, loss_cfg, 1.0)?;
                let g = f2a_backward(&trace, &up, &model.fusion, &model.forecaster)?;
                grads.add_fusion(&g, scale, train_decoder);
            }
            optimizer_step(model, &grads, &mut state, lr, cfg, trainable)?;
        }
        let n = windows.len() as f64;
        log.push(EpochLog {
            epoch: epoch + 1,
            lr,
            total: tot / n,
            ap: ap / n,
            forecast: fc / n,
        });
    }
    debug_assert_eq!(frozen_sum, model.forecaster.encoder_checksum());
    Ok(log)
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: Model,
    pub pretrain_losses: Vec<f64>,
    pub log: Vec<EpochLog>,
    pub store: Option<RetrievalStore>,
}

/// Runs Stage A (skipped for external bases), builds the store with the
/// frozen encoder via `build_store`, then runs Stage B.
pub fn train(
    dims: ModelDims,
    windows: &[WindowSample],
    base: BaseSource,
    loss_cfg: &LossConfig,
    cfg: &TrainConfig,
    build_store: impl FnOnce(&ForecasterParams) -> Result<Option<RetrievalStore>>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    loss_cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut model = Model::init(dims, &mut rng)?;
    let pretrain_losses = if base.is_external() {
        Vec::new()
    } else {
        pretrain(&mut model, windows, cfg, &mut rng)?
    };
    model.forecaster.encoder_frozen = true;
    let store = build_store(&model.forecaster)?;
    if dims.k > 0 && store.is_none() {
        return Err(F2aError::Retrieval(format!("k = {} requires a store", dims.k)));
    }
    let log = finetune(&mut model, windows, store.as_ref(), base, loss_cfg, cfg, &mut rng)?;
    Ok(TrainOutcome {
        model,
        pretrain_losses,
        log,
        store,
    })
}

/// Threshold maximizing F1 over midpoints between consecutive distinct scores.
/// Ties resolve to the smallest threshold.
pub fn calibrate_threshold(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(F2aError::shape("scores vs labels", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == labels.len() {
        return Err(F2aError::DegenerateLabels(format!(
            "threshold calibration needs both classes, got {positives} positives of {}",
            labels.len()
        )));
    }
    let mut pairs: Vec<(f64, u8)> = scores.iter().copied().zip(labels.iter().copied()).collect();
    pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
    // (value, positives, negatives) per distinct score, ascending.
    let mut groups: Vec<(f64, usize, usize)> = Vec::new();
    for (s, l) in pairs {
        match groups.last_mut() {
            Some(g) if g.0 == s => {
                g.1 += l as usize;
                g.2 += 1 - l as usize;
            }
            _ => groups.push((s, l as usize, 1 - l as usize)),
        }
    }
    if groups.len() < 2 {
        return Err(F2aError::InvalidArgument {
            arg: "scores",
            reason: "all scores are equal; no threshold separates them".into(),
        });
    }
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut best: Option<(f64, f64)> = None;
    // Walk from the highest group down so predicted positives grow; threshold
    // between groups i-1 and i predicts groups i.. as positive.
    for i in (1..groups.len()).rev() {
        tp += groups[i].1;
        fp += groups[i].2;
        let u = 0.5 * (groups[i - 1].0 + groups[i].0);
        let f1 = crate::metrics::f1_from_counts(tp, fp, positives - tp).f1;
        match best {
            Some((bf, _)) if f1 < bf => {}
            _ => best = Some((f1, u)),
        }
    }
    Ok(best.unwrap().1)
}
