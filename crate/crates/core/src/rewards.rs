//! Verifiable rewards for policy fine-tuning: output format, action
//! correctness, rationale grounding and rationale length.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::DiscreteAction;
use crate::tokenizer::{parse_tagged_output, split_words, ParseResult};

/// 1 iff the output parses as one think block followed by one action block.
pub fn reward_format(raw: &str) -> f64 {
    if parse_tagged_output(raw).is_ok() {
        1.0
    } else {
        0.0
    }
}

pub fn reward_action(parsed: &ParseResult, expert: DiscreteAction) -> f64 {
    match parsed {
        Ok(p) if p.action == expert => 1.0,
        _ => 0.0,
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("grounding verifier failed: {0}")]
pub struct VerifierError(pub String);

/// Scores how well a rationale names the facts of the current sample.
pub trait GroundingVerifier: Send + Sync {
    /// Returns a score in `[0, 1]`.
    fn verify(&self, cot: &str, landmark: &str, stage: usize) -> Result<f64, VerifierError>;
}

/// Mean of two checks on normalized text: the landmark label appears as a
/// word sequence, and `stage <n>` appears with the right number.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalVerifier;

fn normalize(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_alphanumeric())
        .filter(|w| !w.is_empty())
        .map(str::to_string)
        .collect()
}

fn contains_run(haystack: &[String], needle: &[String]) -> bool {
    !needle.is_empty() && haystack.windows(needle.len()).any(|w| w == needle)
}

impl GroundingVerifier for LexicalVerifier {
    fn verify(&self, cot: &str, landmark: &str, stage: usize) -> Result<f64, VerifierError> {
        let words = normalize(cot);
        let lm = contains_run(&words, &normalize(landmark));
        let st = contains_run(&words, &["stage".to_string(), stage.to_string()]);
        Ok((lm as u8 + st as u8) as f64 / 2.0)
    }
}

/// Verifier score for a parsed output; 0 without calling the verifier when the
/// output did not parse, and 0 (with a warning) when the verifier fails or
/// returns a value outside `[0, 1]`.
pub fn reward_grounding(parsed: &ParseResult, landmark: &str, stage: usize, verifier: &dyn GroundingVerifier) -> f64 {
    let Ok(p) = parsed else {
        return 0.0;
    };
    match verifier.verify(&p.cot, landmark, stage) {
        Ok(s) if (0.0..=1.0).contains(&s) => s,
        Ok(s) => {
            log::warn!("grounding verifier returned out-of-range score {s}");
            0.0
        }
        Err(e) => {
            log::warn!("{e}");
            0.0
        }
    }
}

/// Breakpoints of the piecewise-linear length reward in the ratio
/// `generated / expert` rationale length.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LengthShape {
    pub ramp_start: f64,
    pub plateau_start: f64,
    pub plateau_end: f64,
    pub floor_at: f64,
}

impl Default for LengthShape {
    fn default() -> Self {
        Self {
            ramp_start: 0.5,
            plateau_start: 1.0,
            plateau_end: 1.5,
            floor_at: 3.0,
        }
    }
}

/// 0 below `ramp_start`, rising to 1 at `plateau_start`, flat until
/// `plateau_end`, then falling to -1 at `floor_at` and staying there.
pub fn reward_length_with(generated: usize, expert: usize, shape: &LengthShape) -> f64 {
    let rho = generated as f64 / expert.max(1) as f64;
    let s = shape;
    if rho < s.ramp_start {
        0.0
    } else if rho < s.plateau_start {
        (rho - s.ramp_start) / (s.plateau_start - s.ramp_start)
    } else if rho <= s.plateau_end {
        1.0
    } else if rho < s.floor_at {
        1.0 - 2.0 * (rho - s.plateau_end) / (s.floor_at - s.plateau_end)
    } else {
        -1.0
    }
}

pub fn reward_length(generated: usize, expert: usize) -> f64 {
    reward_length_with(generated, expert, &LengthShape::default())
}

/// Rationale length in tokens, counted without a vocabulary.
pub fn cot_length(cot: &str) -> usize {
    split_words(cot).len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardWeights {
    pub format: f64,
    pub action: f64,
    pub grounding: f64,
    pub length: f64,
}

impl Default for RewardWeights {
    fn default() -> Self {
        Self {
            format: 0.5,
            action: 2.0,
            grounding: 1.0,
            length: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub format: f64,
    pub action: f64,
    pub grounding: f64,
    pub length: f64,
    pub total: f64,
    pub weights: RewardWeights,
}

#[derive(Debug, Error, Clone, PartialEq)]
#[error("reward component `{name}` = {value} is out of range")]
pub struct RewardRangeError {
    pub name: &'static str,
    pub value: f64,
}

/// Weighted sum of the four components after range checks.
pub fn aggregate(
    format: f64,
    action: f64,
    grounding: f64,
    length: f64,
    weights: &RewardWeights,
) -> Result<RewardBreakdown, RewardRangeError> {
    let checks = [
        ("format", format, format == 0.0 || format == 1.0),
        ("action", action, action == 0.0 || action == 1.0),
        ("grounding", grounding, (0.0..=1.0).contains(&grounding)),
        ("length", length, (-1.0..=1.0).contains(&length)),
    ];
    for (name, value, ok) in checks {
        if !ok {
            return Err(RewardRangeError { name, value });
        }
    }
    let w = weights;
    Ok(RewardBreakdown {
        format,
        action,
        grounding,
        length,
        total: w.format * format + w.action * action + w.grounding * grounding + w.length * length,
        weights: *weights,
    })
}

/// Facts a rollout is scored against.
#[derive(Debug, Clone, Copy)]
pub struct RewardTarget<'a> {
    pub action: DiscreteAction,
    pub landmark: &'a str,
    pub stage: usize,
    /// Token length of the reference rationale.
    pub expert_cot_len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RewardConfig {
    pub weights: RewardWeights,
    pub length: LengthShape,
}

impl Default for RewardConfig {
    fn default() -> Self {
        Self {
            weights: RewardWeights::default(),
            length: LengthShape::default(),
        }
    }
}

/// Scores one raw generated output. Total: any input yields a breakdown.
pub fn score_output(
    raw: &str,
    target: &RewardTarget<'_>,
    verifier: &dyn GroundingVerifier,
    config: &RewardConfig,
) -> RewardBreakdown {
    let parsed = parse_tagged_output(raw);
    let format = if parsed.is_ok() { 1.0 } else { 0.0 };
    let action = reward_action(&parsed, target.action);
    let grounding = reward_grounding(&parsed, target.landmark, target.stage, verifier);
    let length = match &parsed {
        Ok(p) => reward_length_with(cot_length(&p.cot), target.expert_cot_len, &config.length),
        Err(_) => 0.0,
    };
    aggregate(format, action, grounding, length, &config.weights).expect("components are in range by construction")
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const GOOD: &str = "<think>This is stage 2 of 3, near the red tower. Next I will turn left.</think><action>turn_left</action>";

    #[test]
    fn format_cases() {
        assert_eq!(reward_format(GOOD), 1.0);
        assert_eq!(reward_format("<action>stop</action>"), 0.0);
        assert_eq!(reward_format("<think>a</think><action>stop</action><action>stop</action>"), 0.0);
    }

    #[test]
    fn action_cases() {
        let p = parse_tagged_output(GOOD);
        assert_eq!(reward_action(&p, DiscreteAction::TurnLeft), 1.0);
        assert_eq!(reward_action(&p, DiscreteAction::Straight), 0.0);
        assert_eq!(reward_action(&parse_tagged_output("junk"), DiscreteAction::TurnLeft), 0.0);
    }

    #[test]
    fn grounding_cases() {
        let v = LexicalVerifier;
        let p = parse_tagged_output(GOOD);
        assert_eq!(reward_grounding(&p, "red tower", 2, &v), 1.0);
        assert_eq!(reward_grounding(&p, "red tower", 3, &v), 0.5);
        assert_eq!(reward_grounding(&p, "bridge", 1, &v), 0.0);
        // "stage 2" must not match stage 20, nor "tower" alone match "red tower"
        assert_eq!(v.verify("stage 20 near the tower", "red tower", 2).unwrap(), 0.0);
        assert_eq!(v.verify("STAGE 2, Red  Tower!", "red tower", 2).unwrap(), 1.0);
    }

    struct Failing;
    impl GroundingVerifier for Failing {
        fn verify(&self, _: &str, _: &str, _: usize) -> Result<f64, VerifierError> {
            Err(VerifierError("offline".into()))
        }
    }

    struct Panicky;
    impl GroundingVerifier for Panicky {
        fn verify(&self, _: &str, _: &str, _: usize) -> Result<f64, VerifierError> {
            panic!("must not be called on parse failure")
        }
    }

    #[test]
    fn grounding_failures_score_zero() {
        assert_eq!(reward_grounding(&parse_tagged_output(GOOD), "red tower", 2, &Failing), 0.0);
        assert_eq!(reward_grounding(&parse_tagged_output("nope"), "red tower", 2, &Panicky), 0.0);
    }

    #[test]
    fn length_anchors() {
        assert_eq!(reward_length(12, 10), 1.0);
        assert_eq!(reward_length(30, 10), -1.0);
        assert_eq!(reward_length(45, 20), 0.0);
        assert_eq!(reward_length(4, 10), 0.0);
        assert_eq!(reward_length(75, 100), 0.5);
        assert_eq!(reward_length(1000, 10), -1.0);
    }

    #[test]
    fn aggregate_cases() {
        let w = RewardWeights::default();
        assert_eq!(aggregate(1.0, 1.0, 1.0, 1.0, &w).unwrap().total, 4.0);
        assert_eq!(aggregate(0.0, 0.0, 0.0, 0.0, &w).unwrap().total, 0.0);
        assert_eq!(aggregate(1.0, 0.0, 0.5, 1.0, &w).unwrap().total, 1.5);
        assert!(aggregate(0.5, 0.0, 0.0, 0.0, &w).is_err());
        assert!(aggregate(1.0, 0.0, 1.5, 0.0, &w).is_err());
    }

    #[test]
    fn scores_well_formed_output() {
        let t = RewardTarget {
            action: DiscreteAction::TurnLeft,
            landmark: "red tower",
            stage: 2,
            expert_cot_len: cot_length("This is stage 2 of 3, near the red tower. Next I will turn left."),
        };
        let b = score_output(GOOD, &t, &LexicalVerifier, &RewardConfig::default());
        assert_eq!(b.total, 4.0);
    }

    proptest! {
        #[test]
        fn length_continuous_and_monotone_tail(a in 50usize..4000, b in 50usize..4000) {
            let (lo, hi) = (a.min(b), a.max(b));
            // ratios relative to 100 tokens; the tail past 1.5 never increases
            if lo >= 150 {
                prop_assert!(reward_length(hi, 100) <= reward_length(lo, 100));
            }
            prop_assert!((-1.0..=1.0).contains(&reward_length(a, 100)));
        }

        #[test]
        fn continuity(x in 0.51f64..5.0) {
            let shape = LengthShape::default();
            let f = |r: f64| reward_length_with((r * 1e6) as usize, 1_000_000, &shape);
            prop_assert!((f(x) - f(x + 1e-5)).abs() < 1e-3);
        }

        #[test]
        fn action_never_exceeds_format(bytes in proptest::collection::vec(any::<u8>(), 0..120), k in 0usize..6) {
            let text = String::from_utf8_lossy(&bytes);
            let a = DiscreteAction::ALL[k];
            let p = parse_tagged_output(&text);
            prop_assert!(reward_action(&p, a) <= reward_format(&text));
        }

        #[test]
        fn aggregate_is_linear(f in 0u8..2, a in 0u8..2, g in 0.0f64..1.0, l in -1.0f64..1.0, dg in 0.0f64..1.0) {
            let w = RewardWeights::default();
            let base = aggregate(f as f64, a as f64, g * (1.0 - dg), l, &w).unwrap().total;
            let bumped = aggregate(f as f64, a as f64, g, l, &w).unwrap().total;
            prop_assert!((bumped - base - w.grounding * g * dg).abs() < 1e-12);
        }
    }
}
