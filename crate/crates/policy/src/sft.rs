//! Supervised fine-tuning of both heads with a learnable loss balance.
//!
//! Per-sample loss is `L_LM + λ·L_WP`; a batch averages it over samples and,
//! when λ is learned, adds `-log λ` so that λ settles near `1 / L_WP` instead
//! of collapsing to zero. λ is parametrized as `exp(log_lambda)`.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uavnav_core::dataset::derive_seed;

use crate::example::Example;
use crate::loss::{lm_loss, wp_loss, LossError};
use crate::model::{DualHeadModel, Grads, ModelError};
use crate::optim::{lr_at, AdamW, AdamWConfig, Slot};
use crate::tensor::Group;

#[derive(Debug, Error)]
pub enum SftError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("loss: {0}")]
    Loss(#[from] LossError),
    #[error("non-finite loss at step {step} (samples {ids:?})")]
    NonFinite { step: usize, ids: Vec<u64> },
    #[error("bad config: {0}")]
    Config(String),
    #[error("empty training set")]
    NoData,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftConfig {
    pub lr: f64,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub log_lambda_init: f64,
    /// Fixes λ (no `-log λ` term). `Some(0.0)` also freezes the waypoint head.
    pub fixed_lambda: Option<f64>,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub seed: u64,
    /// Validation cadence in optimizer steps; 0 validates only at the end.
    pub val_every: usize,
    /// Caps the number of optimizer steps.
    pub max_steps: Option<usize>,
}

impl Default for SftConfig {
    fn default() -> Self {
        Self {
            lr: 2e-5,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            epochs: 1,
            micro_batch: 6,
            grad_accum: 8,
            log_lambda_init: 0.0,
            fixed_lambda: None,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            seed: 0,
            val_every: 0,
            max_steps: None,
        }
    }
}

impl SftConfig {
    pub fn validate(&self) -> Result<(), SftError> {
        let ok = self.lr > 0.0
            && (0.0..1.0).contains(&self.warmup_ratio)
            && self.weight_decay >= 0.0
            && self.epochs > 0
            && self.micro_batch > 0
            && self.grad_accum > 0
            && self.eps > 0.0
            && self.fixed_lambda.map_or(true, |l| l >= 0.0 && l.is_finite());
        if ok {
            Ok(())
        } else {
            Err(SftError::Config(format!("{self:?}")))
        }
    }

    pub fn adamw(&self) -> AdamWConfig {
        AdamWConfig {
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps,
            weight_decay: self.weight_decay,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    pub fn steps_per_epoch(&self, n: usize) -> usize {
        n.div_ceil(self.batch_size())
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * self.steps_per_epoch(n);
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// Per-sample losses.
pub fn sample_losses(model: &DualHeadModel<f64>, ex: &Example) -> Result<(f64, f64), SftError> {
    let (out, _) = model.forward(&ex.frames, &ex.encoded.tokens, Some(ex.encoded.slots))?;
    let (lm, _) = lm_loss(&out.logits, model.config.vocab, &ex.targets(), &ex.mask())?;
    let (wp, _) = wp_loss(&out.waypoints.expect("slots given"), &ex.waypoints);
    Ok((lm, wp))
}

/// Adds `scale · ∇(L_LM + λ·L_WP)` for one sample into `grads`.
pub fn accumulate_sample(
    model: &DualHeadModel<f64>,
    ex: &Example,
    lambda: f64,
    scale: f64,
    grads: &mut Grads<f64>,
) -> Result<(f64, f64), SftError> {
    let (out, cache) = model.forward(&ex.frames, &ex.encoded.tokens, Some(ex.encoded.slots))?;
    let (lm, mut dlogits) = lm_loss(&out.logits, model.config.vocab, &ex.targets(), &ex.mask())?;
    let (wp, mut dwp) = wp_loss(&out.waypoints.expect("slots given"), &ex.waypoints);
    dlogits.iter_mut().for_each(|g| *g *= scale);
    dwp.iter_mut().flatten().for_each(|g| *g *= scale * lambda);
    let dwp = (lambda != 0.0).then_some(&dwp);
    model.backward(&cache, Some(&dlogits), dwp, grads);
    Ok((lm, wp))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SftLosses {
    pub total: f64,
    pub lm: f64,
    pub wp: f64,
    pub lambda: f64,
}

/// Balance term and the value of λ for a given parametrization.
fn lambda_of(cfg_fixed: Option<f64>, log_lambda: f64) -> f64 {
    cfg_fixed.unwrap_or_else(|| log_lambda.exp())
}

fn combine(lm: f64, wp: f64, fixed: Option<f64>, log_lambda: f64) -> SftLosses {
    let lambda = lambda_of(fixed, log_lambda);
    let reg = if fixed.is_some() { 0.0 } else { -log_lambda };
    SftLosses {
        total: lm + lambda * wp + reg,
        lm,
        wp,
        lambda,
    }
}

/// Batch objective without gradients.
pub fn objective(model: &DualHeadModel<f64>, batch: &[&Example], log_lambda: f64, fixed: Option<f64>) -> Result<SftLosses, SftError> {
    if batch.is_empty() {
        return Err(SftError::NoData);
    }
    let (mut lm, mut wp) = (0.0, 0.0);
    for ex in batch {
        let (a, b) = sample_losses(model, ex)?;
        lm += a;
        wp += b;
    }
    let n = batch.len() as f64;
    Ok(combine(lm / n, wp / n, fixed, log_lambda))
}

#[derive(Debug, Clone)]
pub struct BatchGradient {
    pub losses: SftLosses,
    pub grads: Grads<f64>,
    /// Derivative of the objective with respect to `log_lambda` (0 when fixed).
    pub d_log_lambda: f64,
}

/// Gradient of the objective averaged over micro-batches, each contributing
/// the mean over its own samples.
pub fn accumulated_gradient(
    model: &DualHeadModel<f64>,
    micro_batches: &[&[&Example]],
    log_lambda: f64,
    fixed: Option<f64>,
) -> Result<BatchGradient, SftError> {
    if micro_batches.is_empty() || micro_batches.iter().any(|b| b.is_empty()) {
        return Err(SftError::NoData);
    }
    let lambda = lambda_of(fixed, log_lambda);
    let mut grads = model.zero_grads();
    let k = micro_batches.len() as f64;
    let (mut lm, mut wp) = (0.0, 0.0);
    for mb in micro_batches {
        let scale = 1.0 / (mb.len() as f64 * k);
        for ex in *mb {
            let (a, b) = accumulate_sample(model, ex, lambda, scale, &mut grads)?;
            lm += a * scale;
            wp += b * scale;
        }
    }
    let losses = combine(lm, wp, fixed, log_lambda);
    let d_log_lambda = if fixed.is_some() { 0.0 } else { lambda * wp - 1.0 };
    Ok(BatchGradient {
        losses,
        grads,
        d_log_lambda,
    })
}

/// Model, balance parameter and optimizer moments.
#[derive(Debug, Clone)]
pub struct SftState {
    pub model: DualHeadModel<f64>,
    pub log_lambda: f64,
    pub opt: AdamW,
    /// Optimizer steps taken.
    pub step: usize,
}

impl SftState {
    pub fn new(model: DualHeadModel<f64>, cfg: &SftConfig) -> Self {
        let sizes: Vec<usize> = model.params.iter().map(|t| t.len()).chain([1]).collect();
        Self {
            opt: AdamW::new(cfg.adamw(), &sizes),
            model,
            log_lambda: cfg.log_lambda_init,
            step: 0,
        }
    }

    pub fn lambda(&self, cfg: &SftConfig) -> f64 {
        lambda_of(cfg.fixed_lambda, self.log_lambda)
    }
}

/// Applies one optimizer update from an already computed gradient.
pub fn apply_update(state: &mut SftState, g: &BatchGradient, cfg: &SftConfig, lr: f64) {
    let wp_active = cfg.fixed_lambda != Some(0.0);
    let lambda_active = cfg.fixed_lambda.is_none();
    let mut ll = [state.log_lambda];
    let dll = [g.d_log_lambda];
    let mut slots: Vec<Slot<'_>> = state
        .model
        .params
        .iter_mut()
        .zip(&g.grads)
        .map(|(t, gr)| Slot {
            decay: t.shape.len() >= 2,
            active: t.group == Group::Lm || wp_active,
            param: &mut t.data,
            grad: gr,
        })
        .collect();
    slots.push(Slot {
        param: &mut ll,
        grad: &dll,
        decay: false,
        active: lambda_active,
    });
    state.opt.step(slots, lr);
    state.log_lambda = ll[0];
    state.step += 1;
}

/// One optimizer step over `micro_batches`; returns the pre-update losses.
pub fn sft_step(state: &mut SftState, micro_batches: &[&[&Example]], cfg: &SftConfig, lr: f64) -> Result<SftLosses, SftError> {
    let g = accumulated_gradient(&state.model, micro_batches, state.log_lambda, cfg.fixed_lambda)?;
    if !g.losses.total.is_finite() || g.grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(SftError::NonFinite {
            step: state.step,
            ids: micro_batches.iter().flat_map(|b| b.iter().map(|e| e.id)).collect(),
        });
    }
    apply_update(state, &g, cfg, lr);
    Ok(g.losses)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SftStepLog {
    pub step: usize,
    pub epoch: usize,
    pub lm: f64,
    pub wp: f64,
    pub total: f64,
    pub lambda: f64,
    pub lr: f64,
    /// Validation objective when measured after this step.
    pub val_total: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Control {
    Continue,
    Stop,
}

#[derive(Debug, Clone)]
pub struct SftOutcome {
    pub initial_val: Option<f64>,
    pub final_val: Option<f64>,
    pub best_val: Option<f64>,
    /// Model and log-λ with the lowest validation objective.
    pub best: Option<(DualHeadModel<f64>, f64)>,
    pub total_steps: usize,
    /// True when the callback asked to stop early.
    pub interrupted: bool,
}

/// Sample order of `epoch`, fixed by the seed.
pub fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed, epoch as u64)));
    order
}

/// Runs (or resumes, from `state.step`) supervised training. `on_step` sees
/// every log record together with the updated state.
pub fn train_sft(
    state: &mut SftState,
    train: &[Example],
    val: &[Example],
    cfg: &SftConfig,
    on_step: &mut dyn FnMut(&SftStepLog, &SftState) -> Control,
) -> Result<SftOutcome, SftError> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(SftError::NoData);
    }
    let total = cfg.total_steps(train.len());
    let per_epoch = cfg.steps_per_epoch(train.len());
    let val_refs: Vec<&Example> = val.iter().collect();
    let val_loss = |s: &SftState| -> Result<Option<f64>, SftError> {
        if val_refs.is_empty() {
            return Ok(None);
        }
        Ok(Some(objective(&s.model, &val_refs, s.log_lambda, cfg.fixed_lambda)?.total))
    };
    let initial_val = val_loss(state)?;
    let mut out = SftOutcome {
        initial_val,
        final_val: initial_val,
        best_val: initial_val,
        best: initial_val.map(|_| (state.model.clone(), state.log_lambda)),
        total_steps: total,
        interrupted: false,
    };
    let mut order_epoch = usize::MAX;
    let mut order = Vec::new();
    while state.step < total {
        let step = state.step;
        let epoch = step / per_epoch;
        if epoch != order_epoch {
            order = epoch_order(train.len(), cfg.seed, epoch);
            order_epoch = epoch;
        }
        let b = step % per_epoch;
        let idx = &order[b * cfg.batch_size()..((b + 1) * cfg.batch_size()).min(train.len())];
        let refs: Vec<&Example> = idx.iter().map(|&i| &train[i]).collect();
        let micro: Vec<&[&Example]> = refs.chunks(cfg.micro_batch).collect();
        let lr = lr_at(step, total, cfg.warmup_ratio, cfg.lr);
        let losses = sft_step(state, &micro, cfg, lr)?;
        let last = state.step == total;
        let val_total = if last || (cfg.val_every > 0 && state.step % cfg.val_every == 0) {
            let v = val_loss(state)?;
            if let Some(v) = v {
                out.final_val = Some(v);
                if out.best_val.map_or(true, |b| v < b) {
                    out.best_val = Some(v);
                    out.best = Some((state.model.clone(), state.log_lambda));
                }
            }
            v
        } else {
            None
        };
        let log = SftStepLog {
            step,
            epoch,
            lm: losses.lm,
            wp: losses.wp,
            total: losses.total,
            lambda: losses.lambda,
            lr,
            val_total,
        };
        log::debug!("sft step {step} lm {:.4} wp {:.4} lambda {:.4}", losses.lm, losses.wp, losses.lambda);
        if on_step(&log, state) == Control::Stop && state.step < total {
            out.interrupted = true;
            break;
        }
    }
    Ok(out)
}
