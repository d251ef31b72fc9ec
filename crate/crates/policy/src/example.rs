//! Corpus samples turned into model inputs.

use uavnav_core::dataset::TrajectorySample;
use uavnav_core::rewards::cot_length;
use uavnav_core::tokenizer::{encode_parts, encode_prompt, EncodedSample, TokenizerError, Vocabulary};
use uavnav_core::DiscreteAction;

use crate::model::SparseFrame;

#[derive(Debug, Clone, PartialEq)]
pub struct Example {
    pub id: u64,
    pub frames: Vec<SparseFrame>,
    pub encoded: EncodedSample,
    /// Prompt only (BOS, instruction, history); generation starts after it.
    pub prompt: Vec<u32>,
    /// Body-frame expert waypoints `[x, y, z, yaw]`.
    pub waypoints: [[f64; 4]; 3],
    pub action: DiscreteAction,
    pub raw_action: DiscreteAction,
    pub landmark: String,
    pub stage: usize,
    pub cot_len: usize,
}

impl Example {
    pub fn from_sample(vocab: &Vocabulary, s: &TrajectorySample) -> Result<Self, TokenizerError> {
        let encoded = encode_parts(vocab, &s.instruction, &s.history_actions, &s.cot, s.action_label)?;
        let prompt = encode_prompt(vocab, &s.instruction, &s.history_actions)?;
        Ok(Self {
            id: s.id,
            frames: s.frames.iter().map(|f| SparseFrame::from_observation(f)).collect(),
            encoded,
            prompt,
            waypoints: s.future_waypoints.map(|w| w.components()),
            action: s.action_label,
            raw_action: s.raw_label,
            landmark: s.landmark.clone(),
            stage: s.stage_index,
            cot_len: cot_length(&s.cot),
        })
    }

    /// Next-token targets for every position (the last one is unused).
    pub fn targets(&self) -> Vec<u32> {
        let t = &self.encoded.tokens;
        let mut out = t[1..].to_vec();
        out.push(t[t.len() - 1]);
        out
    }

    /// Positions whose next token is supervised.
    pub fn mask(&self) -> Vec<bool> {
        let r = self.encoded.supervised_positions();
        (0..self.encoded.tokens.len()).map(|t| r.contains(&t)).collect()
    }
}

pub fn examples_from(vocab: &Vocabulary, samples: &[&TrajectorySample]) -> Result<Vec<Example>, TokenizerError> {
    samples.iter().map(|s| Example::from_sample(vocab, s)).collect()
}
