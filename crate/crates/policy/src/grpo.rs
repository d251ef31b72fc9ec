//! Group-relative policy optimization of the language head.
//!
//! For each prompt, G rollouts are sampled from the current policy and
//! scored; advantages are the rewards standardized within the group. The
//! per-token objective is the clipped importance-weighted surrogate plus
//! `β·(e^Δ − Δ − 1)` with `Δ = log p_ref − log p_cur`, averaged over the
//! tokens of each rollout and then over rollouts. Only language-group
//! parameters are updated.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uavnav_core::dataset::derive_seed;
use uavnav_core::rewards::{score_output, GroundingVerifier, RewardBreakdown, RewardConfig, RewardTarget};
use uavnav_core::tokenizer::Vocabulary;

use crate::decode::{generate, DecodeConfig};
use crate::example::Example;
use crate::model::{DualHeadModel, ForwardCache, Grads, ModelError, SparseFrame};
use crate::optim::{lr_at, AdamW, AdamWConfig, Slot};
use crate::tensor::{softmax_in_place, Group};

#[derive(Debug, Error)]
pub enum GrpoError {
    #[error("model: {0}")]
    Model(#[from] ModelError),
    #[error("rollout {rollout}: {what} has {got} log-probs, expected {expected}")]
    Misaligned {
        rollout: usize,
        what: &'static str,
        got: usize,
        expected: usize,
    },
    #[error("non-finite loss in group for sample {sample}")]
    NonFinite { sample: u64 },
    #[error("bad config: {0}")]
    Config(String),
    #[error("empty rollout subset")]
    NoData,
    #[error("waypoint-head parameters changed during reinforcement fine-tuning")]
    WaypointHeadChanged,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftConfig {
    pub lr: f64,
    pub beta: f64,
    pub group_size: usize,
    pub temperature: f64,
    pub top_p: f64,
    pub top_k: usize,
    pub micro_batch: usize,
    pub grad_accum: usize,
    pub clip_eps: f64,
    pub std_floor: f64,
    pub max_new_tokens: usize,
    pub warmup_ratio: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub seed: u64,
    pub max_steps: Option<usize>,
}

impl Default for RftConfig {
    fn default() -> Self {
        Self {
            lr: 2e-6,
            beta: 0.001,
            group_size: 4,
            temperature: 0.9,
            top_p: 0.9,
            top_k: 40,
            micro_batch: 8,
            grad_accum: 8,
            clip_eps: 0.2,
            std_floor: 1e-6,
            max_new_tokens: 64,
            warmup_ratio: 0.1,
            weight_decay: 0.01,
            epochs: 1,
            seed: 0,
            max_steps: None,
        }
    }
}

impl RftConfig {
    pub fn validate(&self) -> Result<(), GrpoError> {
        let ok = self.lr > 0.0
            && self.beta >= 0.0
            && self.group_size >= 2
            && self.clip_eps > 0.0
            && self.clip_eps < 1.0
            && self.std_floor > 0.0
            && self.micro_batch > 0
            && self.grad_accum > 0
            && self.max_new_tokens > 0
            && self.epochs > 0
            && (0.0..1.0).contains(&self.warmup_ratio)
            && (0.0..=1.0).contains(&self.top_p);
        if ok {
            Ok(())
        } else {
            Err(GrpoError::Config(format!("{self:?}")))
        }
    }

    pub fn decode(&self, seed: u64) -> DecodeConfig {
        DecodeConfig {
            temperature: self.temperature,
            top_p: self.top_p,
            top_k: self.top_k,
            max_len: self.max_new_tokens,
            seed,
        }
    }

    pub fn batch_size(&self) -> usize {
        self.micro_batch * self.grad_accum
    }

    pub fn total_steps(&self, n: usize) -> usize {
        let full = self.epochs * n.div_ceil(self.batch_size());
        self.max_steps.map_or(full, |m| m.min(full))
    }
}

/// `(r − mean) / max(std, floor)` with the population standard deviation;
/// exactly zero for a group of equal rewards.
pub fn compute_advantages(rewards: &[f64], std_floor: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    if rewards.iter().all(|&r| r == rewards[0]) {
        return vec![0.0; rewards.len()];
    }
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let denom = var.sqrt().max(std_floor);
    rewards.iter().map(|r| (r - mean) / denom).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct Rollout {
    pub tokens: Vec<u32>,
    pub text: String,
    pub behavior_logprobs: Vec<f64>,
    pub reference_logprobs: Vec<f64>,
    pub reward: RewardBreakdown,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub sample_id: u64,
    pub rollouts: Vec<Rollout>,
}

/// Log-probabilities of `generated` after `prompt`, with the forward cache
/// and logits needed to back-propagate through them.
pub fn sequence_logprobs(
    model: &DualHeadModel<f64>,
    frames: &[SparseFrame],
    prompt: &[u32],
    generated: &[u32],
) -> Result<(Vec<f64>, Vec<f64>, ForwardCache<f64>), ModelError> {
    let tokens: Vec<u32> = prompt.iter().chain(generated).copied().collect();
    let (out, cache) = model.forward(frames, &tokens, None)?;
    let v = model.config.vocab;
    let lp = generated
        .iter()
        .enumerate()
        .map(|(k, &t)| {
            let r = prompt.len() - 1 + k;
            let row = &out.logits[r * v..(r + 1) * v];
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|x| (x - m).exp()).sum();
            row[t as usize] - m - z.ln()
        })
        .collect();
    Ok((lp, out.logits, cache))
}

/// Samples and scores `cfg.group_size` rollouts for one example. Rollout `i`
/// uses a decoding seed derived from `(seed, sample id, i)`.
#[allow(clippy::too_many_arguments)]
pub fn sample_group(
    model: &DualHeadModel<f64>,
    reference: &DualHeadModel<f64>,
    ex: &Example,
    cfg: &RftConfig,
    seed: u64,
    vocab: &Vocabulary,
    verifier: &dyn GroundingVerifier,
    rewards: &RewardConfig,
) -> Result<RolloutGroup, GrpoError> {
    let target = RewardTarget {
        action: ex.action,
        landmark: &ex.landmark,
        stage: ex.stage,
        expert_cot_len: ex.cot_len.max(1),
    };
    let mut rollouts = Vec::with_capacity(cfg.group_size);
    for i in 0..cfg.group_size {
        let s = derive_seed(derive_seed(seed, ex.id), i as u64);
        let g = generate(model, &ex.frames, &ex.prompt, &cfg.decode(s))?;
        let text = vocab.decode(&g.tokens);
        let reward = score_output(&text, &target, verifier, rewards);
        let (reference_logprobs, _, _) = sequence_logprobs(reference, &ex.frames, &ex.prompt, &g.tokens)?;
        rollouts.push(Rollout {
            tokens: g.tokens,
            text,
            behavior_logprobs: g.logprobs,
            reference_logprobs,
            reward,
            advantage: 0.0,
        });
    }
    let adv = compute_advantages(&rollouts.iter().map(|r| r.reward.total).collect::<Vec<_>>(), cfg.std_floor);
    for (r, a) in rollouts.iter_mut().zip(adv) {
        r.advantage = a;
    }
    Ok(RolloutGroup {
        sample_id: ex.id,
        rollouts,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct GrpoLoss {
    pub loss: f64,
    /// Mean per-token KL estimate.
    pub kl: f64,
    /// Fraction of tokens whose ratio was clipped out of the objective.
    pub clip_fraction: f64,
}

/// Group objective and its derivative with respect to every current
/// log-probability.
pub fn grpo_loss(group: &RolloutGroup, current: &[Vec<f64>], beta: f64, clip_eps: f64) -> Result<(GrpoLoss, Vec<Vec<f64>>), GrpoError> {
    if current.len() != group.rollouts.len() {
        return Err(GrpoError::Misaligned {
            rollout: current.len().min(group.rollouts.len()),
            what: "group",
            got: current.len(),
            expected: group.rollouts.len(),
        });
    }
    let g = group.rollouts.len() as f64;
    let mut out = GrpoLoss::default();
    let mut grads = Vec::with_capacity(current.len());
    let mut tokens = 0usize;
    for (i, (r, cur)) in group.rollouts.iter().zip(current).enumerate() {
        let n = r.tokens.len();
        for (what, v) in [("current", cur), ("behavior", &r.behavior_logprobs), ("reference", &r.reference_logprobs)] {
            if v.len() != n {
                return Err(GrpoError::Misaligned {
                    rollout: i,
                    what,
                    got: v.len(),
                    expected: n,
                });
            }
        }
        let mut d = vec![0.0; n];
        if n == 0 {
            grads.push(d);
            continue;
        }
        let a = r.advantage;
        let (mut sum, mut kl_sum) = (0.0, 0.0);
        for t in 0..n {
            let rho = (cur[t] - r.behavior_logprobs[t]).exp();
            let unclipped = rho * a;
            let clipped = rho.clamp(1.0 - clip_eps, 1.0 + clip_eps) * a;
            let delta = r.reference_logprobs[t] - cur[t];
            let kl = delta.exp() - delta - 1.0;
            let (surr, dsurr) = if unclipped <= clipped {
                (unclipped, a * rho)
            } else {
                out.clip_fraction += 1.0;
                (clipped, 0.0)
            };
            sum += -surr + beta * kl;
            kl_sum += kl;
            d[t] = (-dsurr + beta * (1.0 - delta.exp())) / (n as f64 * g);
        }
        out.loss += sum / n as f64 / g;
        out.kl += kl_sum;
        tokens += n;
        grads.push(d);
    }
    if tokens > 0 {
        out.kl /= tokens as f64;
        out.clip_fraction /= tokens as f64;
    }
    Ok((out, grads))
}

/// Back-propagates `dlogp` (per generated token) into `grads`.
pub fn backward_logprobs(
    model: &DualHeadModel<f64>,
    prompt_len: usize,
    generated: &[u32],
    logits: &[f64],
    cache: &ForwardCache<f64>,
    dlogp: &[f64],
    grads: &mut Grads<f64>,
) {
    let v = model.config.vocab;
    let mut dlogits = vec![0.0; logits.len()];
    for (k, (&t, &d)) in generated.iter().zip(dlogp).enumerate() {
        if d == 0.0 {
            continue;
        }
        let r = prompt_len - 1 + k;
        let row = &mut dlogits[r * v..(r + 1) * v];
        row.copy_from_slice(&logits[r * v..(r + 1) * v]);
        softmax_in_place(row);
        row.iter_mut().for_each(|x| *x *= -d);
        row[t as usize] += d;
    }
    model.backward(cache, Some(&dlogits), None, grads);
}

/// Loss of one group under the current model, accumulating `scale ·`
/// gradient into `grads` (language group only).
pub fn group_gradient(
    model: &DualHeadModel<f64>,
    ex: &Example,
    group: &RolloutGroup,
    cfg: &RftConfig,
    scale: f64,
    grads: &mut Grads<f64>,
) -> Result<GrpoLoss, GrpoError> {
    let mut current = Vec::new();
    let mut saved = Vec::new();
    for r in &group.rollouts {
        let (lp, logits, cache) = sequence_logprobs(model, &ex.frames, &ex.prompt, &r.tokens)?;
        current.push(lp);
        saved.push((logits, cache));
    }
    let (loss, dlogp) = grpo_loss(group, &current, cfg.beta, cfg.clip_eps)?;
    if !loss.loss.is_finite() {
        return Err(GrpoError::NonFinite { sample: group.sample_id });
    }
    for ((r, (logits, cache)), d) in group.rollouts.iter().zip(&saved).zip(&dlogp) {
        let d: Vec<f64> = d.iter().map(|x| x * scale).collect();
        backward_logprobs(model, ex.prompt.len(), &r.tokens, logits, cache, &d, grads);
    }
    Ok(loss)
}

#[derive(Debug, Clone)]
pub struct RftState {
    pub model: DualHeadModel<f64>,
    /// Frozen supervised checkpoint for the KL penalty.
    pub reference: DualHeadModel<f64>,
    pub opt: AdamW,
    pub step: usize,
}

impl RftState {
    pub fn new(sft: DualHeadModel<f64>, cfg: &RftConfig) -> Self {
        let sizes: Vec<usize> = sft.params.iter().map(|t| t.len()).collect();
        Self {
            opt: AdamW::new(
                AdamWConfig {
                    weight_decay: cfg.weight_decay,
                    ..AdamWConfig::default()
                },
                &sizes,
            ),
            reference: sft.clone(),
            model: sft,
            step: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RftStepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
    pub kl: f64,
    pub clip_fraction: f64,
    pub reward_total: f64,
    pub reward_format: f64,
    pub reward_action: f64,
    pub reward_grounding: f64,
    pub reward_length: f64,
    pub advantage_abs_mean: f64,
    /// Share of groups whose rewards were all equal.
    pub degenerate_groups: f64,
}

#[derive(Debug, Clone)]
pub struct RftOutcome {
    pub logs: Vec<RftStepLog>,
    pub interrupted: bool,
    pub wp_checksum: String,
}

fn order_for(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(seed ^ 0x6770, epoch as u64)));
    order
}

/// One optimizer step of reinforcement fine-tuning over `batch`, split into
/// micro-batches of `cfg.micro_batch` prompts.
#[allow(clippy::too_many_arguments)]
pub fn rft_step(
    state: &mut RftState,
    batch: &[&Example],
    cfg: &RftConfig,
    lr: f64,
    seed: u64,
    vocab: &Vocabulary,
    verifier: &(dyn GroundingVerifier + Sync),
    rewards: &RewardConfig,
) -> Result<RftStepLog, GrpoError> {
    if batch.is_empty() {
        return Err(GrpoError::NoData);
    }
    let groups: Vec<RolloutGroup> = batch
        .par_iter()
        .map(|ex| sample_group(&state.model, &state.reference, ex, cfg, seed, vocab, verifier, rewards))
        .collect::<Result<_, _>>()?;
    let micro: Vec<&[&Example]> = batch.chunks(cfg.micro_batch).collect();
    let k = micro.len() as f64;
    let mut grads = state.model.zero_grads();
    let mut log = RftStepLog {
        step: state.step,
        lr,
        loss: 0.0,
        kl: 0.0,
        clip_fraction: 0.0,
        reward_total: 0.0,
        reward_format: 0.0,
        reward_action: 0.0,
        reward_grounding: 0.0,
        reward_length: 0.0,
        advantage_abs_mean: 0.0,
        degenerate_groups: 0.0,
    };
    let mut gi = 0;
    for mb in &micro {
        let scale = 1.0 / (mb.len() as f64 * k);
        for ex in *mb {
            let group = &groups[gi];
            gi += 1;
            let l = group_gradient(&state.model, ex, group, cfg, scale, &mut grads)?;
            log.loss += l.loss * scale;
            log.kl += l.kl * scale;
            log.clip_fraction += l.clip_fraction * scale;
        }
    }
    let nr = (groups.len() * cfg.group_size) as f64;
    for g in &groups {
        if g.rollouts.iter().all(|r| r.advantage == 0.0) {
            log.degenerate_groups += 1.0 / groups.len() as f64;
        }
        for r in &g.rollouts {
            log.reward_total += r.reward.total / nr;
            log.reward_format += r.reward.format / nr;
            log.reward_action += r.reward.action / nr;
            log.reward_grounding += r.reward.grounding / nr;
            log.reward_length += r.reward.length / nr;
            log.advantage_abs_mean += r.advantage.abs() / nr;
        }
    }
    if grads.iter().flatten().any(|v| !v.is_finite()) {
        return Err(GrpoError::NonFinite { sample: batch[0].id });
    }
    let slots = state
        .model
        .params
        .iter_mut()
        .zip(&grads)
        .map(|(t, g)| Slot {
            decay: t.shape.len() >= 2,
            active: t.group == Group::Lm,
            param: &mut t.data,
            grad: g,
        })
        .collect();
    state.opt.step(slots, lr);
    state.step += 1;
    Ok(log)
}

/// Runs (or resumes, from `state.step`) reinforcement fine-tuning over the
/// selected subset. Fails if the waypoint head changed.
pub fn train_rft(
    state: &mut RftState,
    subset: &[Example],
    cfg: &RftConfig,
    vocab: &Vocabulary,
    verifier: &(dyn GroundingVerifier + Sync),
    rewards: &RewardConfig,
    on_step: &mut dyn FnMut(&RftStepLog, &RftState) -> crate::sft::Control,
) -> Result<RftOutcome, GrpoError> {
    cfg.validate()?;
    if subset.is_empty() {
        return Err(GrpoError::NoData);
    }
    let before = state.model.group_checksum(Group::Wp);
    let total = cfg.total_steps(subset.len());
    let per_epoch = subset.len().div_ceil(cfg.batch_size());
    let mut out = RftOutcome {
        logs: Vec::new(),
        interrupted: false,
        wp_checksum: before.clone(),
    };
    while state.step < total {
        let step = state.step;
        let epoch = step / per_epoch;
        let order = order_for(subset.len(), cfg.seed, epoch);
        let b = step % per_epoch;
        let idx = &order[b * cfg.batch_size()..((b + 1) * cfg.batch_size()).min(subset.len())];
        let batch: Vec<&Example> = idx.iter().map(|&i| &subset[i]).collect();
        let lr = lr_at(step, total, cfg.warmup_ratio, cfg.lr);
        let seed = derive_seed(cfg.seed, epoch as u64);
        let log = rft_step(state, &batch, cfg, lr, seed, vocab, verifier, rewards)?;
        log::debug!("rft step {step} reward {:.4} kl {:.5}", log.reward_total, log.kl);
        let ctl = on_step(&log, state);
        out.logs.push(log);
        if state.model.group_checksum(Group::Wp) != before {
            return Err(GrpoError::WaypointHeadChanged);
        }
        if ctl == crate::sft::Control::Stop && state.step < total {
            out.interrupted = true;
            break;
        }
    }
    Ok(out)
}
