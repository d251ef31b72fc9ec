//! Sampling from the language head and reading the waypoint head after a
//! generated rationale.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use uavnav_core::tokenizer::{ACTION_CLOSE, EOS, WP1, WP2, WP3};
use uavnav_core::Scalar;

use crate::model::{DualHeadModel, ModelError, SparseFrame, Waypoints};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecodeConfig {
    /// Values `<= 0` decode greedily.
    pub temperature: f64,
    pub top_p: f64,
    /// 0 keeps the whole vocabulary; 1 is greedy.
    pub top_k: usize,
    /// Generated-token budget.
    pub max_len: usize,
    pub seed: u64,
}

impl DecodeConfig {
    pub fn greedy(max_len: usize) -> Self {
        Self {
            temperature: 0.0,
            top_p: 1.0,
            top_k: 0,
            max_len,
            seed: 0,
        }
    }

    pub fn is_greedy(&self) -> bool {
        self.temperature <= 0.0 || self.top_k == 1
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Generation {
    pub tokens: Vec<u32>,
    /// Log-probability of each generated token under the unmodified model
    /// distribution (temperature 1, no truncation).
    pub logprobs: Vec<f64>,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate() {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// Draws one token id from `logits` under `cfg`.
pub fn sample_token<R: Rng>(logits: &[f64], cfg: &DecodeConfig, rng: &mut R) -> usize {
    if cfg.is_greedy() {
        return argmax(logits);
    }
    let mut order: Vec<usize> = (0..logits.len()).collect();
    order.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if cfg.top_k > 0 {
        order.truncate(cfg.top_k);
    }
    let m = logits[order[0]];
    let mut p: Vec<f64> = order.iter().map(|&i| ((logits[i] - m) / cfg.temperature).exp()).collect();
    let z: f64 = p.iter().sum();
    p.iter_mut().for_each(|v| *v /= z);
    if cfg.top_p < 1.0 {
        let mut acc = 0.0;
        let mut keep = p.len();
        for (i, &v) in p.iter().enumerate() {
            acc += v;
            if acc >= cfg.top_p {
                keep = i + 1;
                break;
            }
        }
        p.truncate(keep);
        order.truncate(keep);
    }
    let z: f64 = p.iter().sum();
    let mut u = rng.gen::<f64>() * z;
    for (k, &v) in p.iter().enumerate() {
        if u < v {
            return order[k];
        }
        u -= v;
    }
    order[p.len() - 1]
}

fn log_softmax_at(logits: &[f64], i: usize) -> f64 {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let z: f64 = logits.iter().map(|&v| (v - m).exp()).sum();
    logits[i] - m - z.ln()
}

/// Continues `prompt` until EOS, `cfg.max_len` tokens, or until prompt plus
/// generation fill the text part of the context.
pub fn generate<S: Scalar>(
    model: &DualHeadModel<S>,
    frames: &[SparseFrame],
    prompt: &[u32],
    cfg: &DecodeConfig,
) -> Result<Generation, ModelError> {
    if prompt.is_empty() {
        return Err(ModelError::Empty);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut st = model.start(frames)?;
    let mut logits = Vec::new();
    for &t in prompt {
        logits = model.feed(&mut st, t)?;
    }
    let mut out = Generation {
        tokens: Vec::new(),
        logprobs: Vec::new(),
    };
    let max_text = model.config.context - model.config.prefix_len();
    while out.tokens.len() < cfg.max_len {
        let l: Vec<f64> = logits.iter().map(|v| v.f64()).collect();
        let tok = sample_token(&l, cfg, &mut rng);
        out.tokens.push(tok as u32);
        out.logprobs.push(log_softmax_at(&l, tok));
        if tok as u32 == EOS || prompt.len() + out.tokens.len() >= max_text {
            break;
        }
        logits = model.feed(&mut st, tok as u32)?;
    }
    Ok(out)
}

/// Text sequence with waypoint slots for reading the waypoint head after a
/// generation: everything through `</action>` (or the whole generation when
/// it has none, truncated to fit), then the three slots and EOS.
pub fn with_slots(prompt: &[u32], generated: &[u32], max_text: usize) -> (Vec<u32>, [usize; 3]) {
    let body_end = generated
        .iter()
        .position(|&t| t == ACTION_CLOSE)
        .map(|p| p + 1)
        .unwrap_or_else(|| generated.iter().position(|&t| t == EOS || t == WP1).unwrap_or(generated.len()));
    let mut seq: Vec<u32> = prompt.iter().chain(&generated[..body_end]).copied().collect();
    seq.truncate(max_text.saturating_sub(4));
    let n = seq.len();
    seq.extend([WP1, WP2, WP3, EOS]);
    (seq, [n, n + 1, n + 2])
}

/// Waypoints predicted after `prompt` followed by `generated`.
pub fn predict_waypoints<S: Scalar>(
    model: &DualHeadModel<S>,
    frames: &[SparseFrame],
    prompt: &[u32],
    generated: &[u32],
) -> Result<Waypoints<S>, ModelError> {
    let max_text = model.config.context - model.config.prefix_len();
    let (seq, slots) = with_slots(prompt, generated, max_text);
    let (out, _) = model.forward(frames, &seq, Some(slots))?;
    Ok(out.waypoints.expect("slots given"))
}
