//! Closed-loop evaluation of either head on held-out trajectories.
//!
//! An episode starts at step 3 of an expert trajectory so that the first
//! prompt has three real history actions and four real frames. The rendered
//! guidance cue follows the expert route from wherever the agent actually is.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{DiscreteCDF, Hypergeometric};
use thiserror::Error;
use uavnav_core::dataset::{derive_seed, Corpus, Split, FRAMES, HISTORY};
use uavnav_core::geometry::{ade, from_body_frame, is_success, navigation_error, to_body_frame};
use uavnav_core::simulator::{
    generate_world, move_to, render_observation, step, ExpertTrajectory, Observation, RouteGuide, SimConfig, World,
};
use uavnav_core::tokenizer::{encode_prompt, parse_tagged_tokens, Vocabulary};
use uavnav_core::{DiscreteAction, Pose64, Waypoint64};

use crate::decode::{generate, predict_waypoints, DecodeConfig};
use crate::example::Example;
use crate::model::{DualHeadModel, SparseFrame};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error("no episode reports")]
    Empty,
    #[error("{predictions} predictions for {labels} labels")]
    LengthMismatch { predictions: usize, labels: usize },
    #[error("world: {0}")]
    World(String),
    #[error("record: {0}")]
    Record(String),
}

/// Which head drives the agent.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Head {
    Lm,
    Wp,
}

impl Head {
    pub fn name(self) -> &'static str {
        match self {
            Head::Lm => "lm",
            Head::Wp => "wp",
        }
    }

    pub fn title(self) -> &'static str {
        match self {
            Head::Lm => "LM head (discrete actions)",
            Head::Wp => "Waypoint head (continuous)",
        }
    }
}

/// What a policy sees at one step.
pub struct StepContext<'a> {
    pub frames: &'a [SparseFrame],
    pub instruction: &'a str,
    pub history: &'a [DiscreteAction],
    pub pose: &'a Pose64,
    /// Index into the expert trajectory the episode is aligned with.
    pub expert_step: usize,
    pub expert: &'a ExpertTrajectory,
    /// Per-episode random stream.
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Decision {
    /// `None` when the output did not parse.
    pub action: Option<DiscreteAction>,
    /// Body-frame `[x, y, z, yaw]`.
    pub waypoints: Option<[[f64; 4]; 3]>,
}

pub trait Policy: Sync {
    fn decide(&self, ctx: &StepContext<'_>) -> Decision;
}

/// Greedy decoding of the trained model.
pub struct ModelPolicy<'a> {
    pub model: &'a DualHeadModel<f64>,
    pub vocab: &'a Vocabulary,
    pub max_new_tokens: usize,
    /// Skip the waypoint-head pass (LM rollouts that do not score ADE).
    pub with_waypoints: bool,
}

impl Policy for ModelPolicy<'_> {
    fn decide(&self, ctx: &StepContext<'_>) -> Decision {
        let prompt = match encode_prompt(self.vocab, ctx.instruction, ctx.history) {
            Ok(p) => p,
            Err(_) => {
                return Decision {
                    action: None,
                    waypoints: None,
                }
            }
        };
        let gen = match generate(self.model, ctx.frames, &prompt, &DecodeConfig::greedy(self.max_new_tokens)) {
            Ok(g) => g,
            Err(e) => {
                log::warn!("generation failed: {e}");
                return Decision {
                    action: None,
                    waypoints: None,
                };
            }
        };
        let action = parse_tagged_tokens(self.vocab, &gen.tokens).ok().map(|p| p.action);
        let waypoints = if self.with_waypoints {
            predict_waypoints(self.model, ctx.frames, &prompt, &gen.tokens).ok()
        } else {
            None
        };
        Decision { action, waypoints }
    }
}

/// Replays the expert: its action and its next three poses.
pub struct ExpertPolicy;

/// Body-frame expert poses after `t`, repeating the final pose.
pub fn expert_waypoints(expert: &ExpertTrajectory, t: usize, pose: &Pose64) -> [[f64; 4]; 3] {
    std::array::from_fn(|k| {
        to_body_frame(&expert.pose_clamped(t + 1 + k).as_waypoint(), pose)
            .expect("finite poses")
            .components()
    })
}

impl Policy for ExpertPolicy {
    fn decide(&self, ctx: &StepContext<'_>) -> Decision {
        let t = ctx.expert_step.min(ctx.expert.len() - 1);
        Decision {
            action: Some(ctx.expert.actions[t]),
            waypoints: Some(expert_waypoints(ctx.expert, ctx.expert_step, ctx.pose)),
        }
    }
}

/// Uniformly random moving actions; never stops on its own.
pub struct RandomWalkPolicy;

impl Policy for RandomWalkPolicy {
    fn decide(&self, ctx: &StepContext<'_>) -> Decision {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(ctx.seed, ctx.expert_step as u64));
        let a = DiscreteAction::from_index(rng.gen_range(0..5)).expect("moving action");
        let mut step = [0.0; 4];
        match a {
            DiscreteAction::Straight => step[0] = 5.0,
            DiscreteAction::TurnLeft => step[3] = 0.5,
            DiscreteAction::TurnRight => step[3] = -0.5,
            DiscreteAction::Ascend => step[2] = 3.0,
            _ => step[2] = -3.0,
        }
        Decision {
            action: Some(a),
            waypoints: Some([step; 3]),
        }
    }
}

/// Always predicts the current pose.
pub struct ZeroWaypointPolicy;

impl Policy for ZeroWaypointPolicy {
    fn decide(&self, _ctx: &StepContext<'_>) -> Decision {
        Decision {
            action: Some(DiscreteAction::Stop),
            waypoints: Some([[0.0; 4]; 3]),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub max_steps: usize,
    /// Generated-token budget per step for model policies.
    pub max_new_tokens: usize,
    /// Consecutive collisions that end an LM episode.
    pub collision_limit: usize,
    /// Waypoint episodes end once the agent is this close to the goal.
    pub arrival_radius: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            max_steps: 40,
            max_new_tokens: 64,
            collision_limit: 2,
            arrival_radius: 5.0,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeReport {
    pub trajectory: u32,
    pub head: Head,
    pub ne: f64,
    pub success: bool,
    /// `None` when no step had a predicted waypoint to score.
    pub ade: Option<f64>,
    pub action_matches: Vec<bool>,
    pub steps: usize,
    pub collisions: usize,
    pub parse_failures: usize,
    pub final_pose: [f64; 4],
}

/// An evaluation episode: a world and the expert trajectory it is scored on.
pub struct EpisodeSpec<'a> {
    pub trajectory: u32,
    pub world: &'a World,
    pub instruction: &'a str,
    pub expert: &'a ExpertTrajectory,
}

/// First step at which an episode takes over from the expert.
pub fn start_step(expert: &ExpertTrajectory) -> usize {
    HISTORY.min(expert.len() - 1)
}

struct Tracker<'a> {
    spec: &'a EpisodeSpec<'a>,
    guide: RouteGuide,
    frames: Vec<SparseFrame>,
    history: Vec<DiscreteAction>,
    pose: Pose64,
    t: usize,
}

impl<'a> Tracker<'a> {
    fn new(spec: &'a EpisodeSpec<'a>) -> Self {
        let e = spec.expert;
        let s = start_step(e);
        let mut guide = RouteGuide::new(e.route.clone(), spec.world.config.lookahead);
        let mut renders: Vec<Observation> = Vec::new();
        for p in &e.poses[..=s] {
            let target = guide.update(&p.position);
            renders.push(render_observation(spec.world, p, &target));
        }
        let mut frames: Vec<SparseFrame> = renders.iter().map(SparseFrame::from_observation).collect();
        while frames.len() < FRAMES {
            frames.insert(0, frames[0].clone());
        }
        let frames = frames.split_off(frames.len() - FRAMES);
        let mut history: Vec<DiscreteAction> = e.actions[..s].to_vec();
        while history.len() < HISTORY {
            history.insert(0, DiscreteAction::Straight);
        }
        Self {
            spec,
            guide,
            frames,
            history,
            pose: e.poses[s],
            t: s,
        }
    }

    fn context(&self, seed: u64) -> StepContext<'_> {
        StepContext {
            frames: &self.frames,
            instruction: self.spec.instruction,
            history: &self.history[self.history.len() - HISTORY..],
            pose: &self.pose,
            expert_step: self.t,
            expert: self.spec.expert,
            seed,
        }
    }

    fn advance(&mut self, action: DiscreteAction, pose: Pose64) {
        self.pose = pose;
        self.history.push(action);
        let target = self.guide.update(&pose.position);
        self.frames.remove(0);
        self.frames
            .push(SparseFrame::from_observation(&render_observation(self.spec.world, &pose, &target)));
        self.t += 1;
    }
}

/// Predicted waypoints paired with the expert poses after step `t`, both in
/// the agent's body frame (distances are frame-invariant).
fn ade_pairs(wps: &[[f64; 4]; 3], pose: &Pose64, expert: &ExpertTrajectory, t: usize) -> Vec<(Waypoint64, Waypoint64)> {
    let want = expert_waypoints(expert, t, pose);
    wps.iter()
        .zip(want)
        .filter_map(|(w, e)| {
            let body = Waypoint64::new(w[0], w[1], w[2], w[3]).ok()?;
            Some((body, Waypoint64 { x: e[0], y: e[1], z: e[2], yaw: e[3] }))
        })
        .collect()
}

fn finish(
    spec: &EpisodeSpec<'_>,
    head: Head,
    tr: &Tracker<'_>,
    pairs: Vec<(Waypoint64, Waypoint64)>,
    matches: Vec<bool>,
    steps: usize,
    collisions: usize,
    parse_failures: usize,
) -> EpisodeReport {
    let ne = navigation_error(&tr.pose.position, &spec.expert.goal);
    let (pred, exp): (Vec<_>, Vec<_>) = pairs.into_iter().unzip();
    EpisodeReport {
        trajectory: spec.trajectory,
        head,
        ne,
        success: is_success(ne),
        ade: ade(&pred, &exp).ok(),
        action_matches: matches,
        steps,
        collisions,
        parse_failures,
        final_pose: tr.pose.as_waypoint().components(),
    }
}

/// Discrete-action episode: decode, parse (failures act as Stop), step.
/// Ends on Stop, `max_steps`, or `collision_limit` consecutive collisions.
pub fn rollout_lm(policy: &dyn Policy, spec: &EpisodeSpec<'_>, cfg: &EvalConfig) -> EpisodeReport {
    let mut tr = Tracker::new(spec);
    let seed = derive_seed(cfg.seed, spec.trajectory as u64);
    let (mut pairs, mut matches) = (Vec::new(), Vec::new());
    let (mut steps, mut collisions, mut streak, mut failures) = (0, 0, 0, 0);
    while steps < cfg.max_steps {
        let d = policy.decide(&tr.context(seed));
        let t = tr.t;
        if let Some(w) = &d.waypoints {
            if t + 1 < spec.expert.len() {
                pairs.extend(ade_pairs(w, &tr.pose, spec.expert, t));
            }
        }
        let action = d.action.unwrap_or_else(|| {
            failures += 1;
            DiscreteAction::Stop
        });
        if t < spec.expert.len() {
            matches.push(action == spec.expert.actions[t]);
        }
        steps += 1;
        if action == DiscreteAction::Stop {
            break;
        }
        let out = step(spec.world, &tr.pose, action);
        if out.collision {
            collisions += 1;
            streak += 1;
        } else {
            streak = 0;
        }
        tr.advance(action, out.pose);
        if streak >= cfg.collision_limit {
            break;
        }
    }
    finish(spec, Head::Lm, &tr, pairs, matches, steps, collisions, failures)
}

/// Continuous episode: move to the first predicted waypoint each step
/// (clamped on collision). Ends within `arrival_radius` of the goal, on a
/// step that does not move, or at `max_steps`.
pub fn rollout_wp(policy: &dyn Policy, spec: &EpisodeSpec<'_>, cfg: &EvalConfig) -> EpisodeReport {
    let mut tr = Tracker::new(spec);
    let seed = derive_seed(cfg.seed, spec.trajectory as u64);
    let (mut pairs, mut matches) = (Vec::new(), Vec::new());
    let (mut steps, mut collisions, mut failures) = (0, 0, 0);
    while steps < cfg.max_steps {
        if navigation_error(&tr.pose.position, &spec.expert.goal) < cfg.arrival_radius {
            break;
        }
        let d = policy.decide(&tr.context(seed));
        let t = tr.t;
        let w = d.waypoints.unwrap_or([[0.0; 4]; 3]);
        if t + 1 < spec.expert.len() {
            pairs.extend(ade_pairs(&w, &tr.pose, spec.expert, t));
        }
        let action = d.action.unwrap_or_else(|| {
            failures += 1;
            DiscreteAction::Stop
        });
        if t < spec.expert.len() {
            matches.push(action == spec.expert.actions[t]);
        }
        steps += 1;
        let target = Waypoint64::new(w[0][0], w[0][1], w[0][2], w[0][3])
            .ok()
            .and_then(|b| from_body_frame(&b, &tr.pose).ok());
        let Some(target) = target else { break };
        let out = move_to(spec.world, &tr.pose, Pose64::from_waypoint(&target));
        collisions += out.collision as usize;
        let moved = (out.pose.position - tr.pose.position).norm() > 1e-9 || out.pose.heading != tr.pose.heading;
        tr.advance(action, out.pose);
        if !moved {
            break;
        }
    }
    finish(spec, Head::Wp, &tr, pairs, matches, steps, collisions, failures)
}

/// Held-out episodes of a corpus with their regenerated worlds.
pub struct EvalSet {
    pub worlds: BTreeMap<u64, World>,
    pub episodes: Vec<(u32, String, ExpertTrajectory)>,
}

impl EvalSet {
    pub fn from_corpus(corpus: &Corpus, split: Split, limit: Option<usize>) -> Result<Self, EvalError> {
        let sim: &SimConfig = &corpus.header.generator.sim;
        let mut worlds = BTreeMap::new();
        let mut episodes = Vec::new();
        for r in corpus.trajectories.iter().filter(|r| r.split == split) {
            if limit.is_some_and(|l| episodes.len() >= l) {
                break;
            }
            let seed = r.expert.world_seed;
            if let std::collections::btree_map::Entry::Vacant(e) = worlds.entry(seed) {
                e.insert(generate_world(seed, sim).map_err(|e| EvalError::World(e.to_string()))?);
            }
            episodes.push((r.id, r.expert.instruction.clone(), r.expert.clone()));
        }
        Ok(Self { worlds, episodes })
    }

    pub fn len(&self) -> usize {
        self.episodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.episodes.is_empty()
    }

    /// Runs every episode with `head`; reports come back in episode order.
    pub fn run(&self, policy: &dyn Policy, head: Head, cfg: &EvalConfig) -> Vec<EpisodeReport> {
        self.episodes
            .par_iter()
            .map(|(id, instr, expert)| {
                let spec = EpisodeSpec {
                    trajectory: *id,
                    world: &self.worlds[&expert.world_seed],
                    instruction: instr,
                    expert,
                };
                match head {
                    Head::Lm => rollout_lm(policy, &spec, cfg),
                    Head::Wp => rollout_wp(policy, &spec, cfg),
                }
            })
            .collect()
    }
}

/// Exact-match percentage.
pub fn action_accuracy(predictions: &[DiscreteAction], labels: &[DiscreteAction]) -> Result<f64, EvalError> {
    if predictions.len() != labels.len() {
        return Err(EvalError::LengthMismatch {
            predictions: predictions.len(),
            labels: labels.len(),
        });
    }
    if labels.is_empty() {
        return Err(EvalError::Empty);
    }
    let hits = predictions.iter().zip(labels).filter(|(a, b)| a == b).count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Action predicted at the action slot with the gold rationale as context
/// (argmax over the six action tokens).
pub fn teacher_forced_action(model: &DualHeadModel<f64>, vocab: &Vocabulary, ex: &Example) -> Option<DiscreteAction> {
    let pos = ex.encoded.action_pos;
    let (out, _) = model.forward(&ex.frames, &ex.encoded.tokens[..pos], None).ok()?;
    let v = model.config.vocab;
    let row = &out.logits[(pos - 1) * v..pos * v];
    DiscreteAction::ALL
        .iter()
        .copied()
        .max_by(|a, b| row[vocab.action_id(*a) as usize].total_cmp(&row[vocab.action_id(*b) as usize]))
}

/// Teacher-forced predictions for a set of examples (in order).
pub fn teacher_forced_predictions(model: &DualHeadModel<f64>, vocab: &Vocabulary, examples: &[Example]) -> Vec<DiscreteAction> {
    examples
        .par_iter()
        .map(|ex| teacher_forced_action(model, vocab, ex).unwrap_or(DiscreteAction::Stop))
        .collect()
}

/// Actions from greedy free-running decoding (parse failures become Stop).
pub fn greedy_predictions(
    model: &DualHeadModel<f64>,
    vocab: &Vocabulary,
    examples: &[Example],
    max_new_tokens: usize,
) -> Vec<DiscreteAction> {
    examples
        .par_iter()
        .map(|ex| {
            generate(model, &ex.frames, &ex.prompt, &DecodeConfig::greedy(max_new_tokens))
                .ok()
                .and_then(|g| parse_tagged_tokens(vocab, &g.tokens).ok())
                .map_or(DiscreteAction::Stop, |p| p.action)
        })
        .collect()
}

/// Mean body-frame waypoint displacement over examples with gold text.
pub fn teacher_forced_ade(model: &DualHeadModel<f64>, examples: &[Example]) -> f64 {
    let per: Vec<f64> = examples
        .par_iter()
        .map(|ex| {
            let (out, _) = model
                .forward(&ex.frames, &ex.encoded.tokens, Some(ex.encoded.slots))
                .expect("example fits the model");
            let w = out.waypoints.expect("slots given");
            (0..3)
                .map(|k| {
                    let d: f64 = (0..3).map(|j| (w[k][j] - ex.waypoints[k][j]).powi(2)).sum();
                    d.sqrt()
                })
                .sum::<f64>()
                / 3.0
        })
        .collect();
    per.iter().sum::<f64>() / per.len().max(1) as f64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeadSummary {
    pub head: Head,
    pub episodes: usize,
    pub mean_ne: f64,
    pub sr_percent: f64,
    pub mean_ade: Option<f64>,
    pub action_accuracy_percent: Option<f64>,
    pub scored_steps: usize,
    pub parse_failures: usize,
    pub collisions: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub heads: Vec<HeadSummary>,
}

/// Per-head aggregates in `Head` order.
pub fn summarize(reports: &[EpisodeReport]) -> Result<EvalSummary, EvalError> {
    if reports.is_empty() {
        return Err(EvalError::Empty);
    }
    let mut by: BTreeMap<Head, Vec<&EpisodeReport>> = BTreeMap::new();
    for r in reports {
        by.entry(r.head).or_default().push(r);
    }
    let heads = by
        .into_iter()
        .map(|(head, rs)| {
            let n = rs.len() as f64;
            let ades: Vec<f64> = rs.iter().filter_map(|r| r.ade).collect();
            let steps: usize = rs.iter().map(|r| r.action_matches.len()).sum();
            let hits: usize = rs.iter().map(|r| r.action_matches.iter().filter(|&&m| m).count()).sum();
            HeadSummary {
                head,
                episodes: rs.len(),
                mean_ne: rs.iter().map(|r| r.ne).sum::<f64>() / n,
                sr_percent: 100.0 * rs.iter().filter(|r| r.success).count() as f64 / n,
                mean_ade: (!ades.is_empty()).then(|| ades.iter().sum::<f64>() / ades.len() as f64),
                action_accuracy_percent: (steps > 0).then(|| 100.0 * hits as f64 / steps as f64),
                scored_steps: steps,
                parse_failures: rs.iter().map(|r| r.parse_failures).sum(),
                collisions: rs.iter().map(|r| r.collisions).sum(),
            }
        })
        .collect();
    Ok(EvalSummary { heads })
}

fn opt(v: Option<f64>, prec: usize) -> String {
    v.map_or_else(|| "-".to_string(), |x| format!("{x:.prec$}"))
}

impl EvalSummary {
    pub fn head(&self, head: Head) -> Option<&HeadSummary> {
        self.heads.iter().find(|h| h.head == head)
    }

    /// One section per head with NE, SR, ADE and action accuracy.
    pub fn table(&self) -> String {
        let mut s = String::new();
        for h in &self.heads {
            let _ = writeln!(s, "== {} ==", h.head.title());
            let _ = writeln!(s, "{:<10} {:>8} {:>8} {:>8} {:>9}", "episodes", "NE(m)", "SR(%)", "ADE(m)", "Acc(%)");
            let _ = writeln!(
                s,
                "{:<10} {:>8.2} {:>8.1} {:>8} {:>9}",
                h.episodes,
                h.mean_ne,
                h.sr_percent,
                opt(h.mean_ade, 2),
                opt(h.action_accuracy_percent, 1)
            );
        }
        s
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("summary serializes")
    }

    pub fn from_json(text: &str) -> Result<Self, EvalError> {
        serde_json::from_str(text).map_err(|e| EvalError::Record(e.to_string()))
    }
}

/// One-sided Fisher exact test that group A succeeds more often than group
/// B: `P(X ≥ a)` for the hypergeometric count of A successes given the
/// margins.
pub fn fisher_one_sided(a_success: u64, a_total: u64, b_success: u64, b_total: u64) -> f64 {
    if a_success == 0 {
        return 1.0;
    }
    let n = a_total + b_total;
    let k = a_success + b_success;
    let h = Hypergeometric::new(n, k, a_total).expect("valid margins");
    h.sf(a_success - 1)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn report(head: Head, ne: f64, ade: Option<f64>, matches: &[bool]) -> EpisodeReport {
        EpisodeReport {
            trajectory: 0,
            head,
            ne,
            success: is_success(ne),
            ade,
            action_matches: matches.to_vec(),
            steps: matches.len(),
            collisions: 0,
            parse_failures: 0,
            final_pose: [0.0; 4],
        }
    }

    #[test]
    fn accuracy_cases() {
        use DiscreteAction::*;
        assert_eq!(action_accuracy(&[Straight, Stop], &[Straight, Stop]).unwrap(), 100.0);
        assert_eq!(action_accuracy(&[Straight, Stop, Ascend, Descend], &[Straight, Stop, Ascend, Stop]).unwrap(), 75.0);
        assert!(action_accuracy(&[Straight], &[]).is_err());
    }

    #[test]
    fn summary_by_hand() {
        let rs = vec![
            report(Head::Lm, 10.0, Some(1.0), &[true, false]),
            report(Head::Lm, 30.0, Some(3.0), &[true, true, true]),
            report(Head::Lm, 20.0, None, &[false]),
            report(Head::Wp, 5.0, Some(0.5), &[]),
        ];
        let s = summarize(&rs).unwrap();
        let lm = s.head(Head::Lm).unwrap();
        assert_eq!(lm.episodes, 3);
        assert!((lm.mean_ne - 20.0).abs() < 1e-12);
        assert!((lm.sr_percent - 200.0 / 3.0).abs() < 1e-12);
        assert_eq!(lm.mean_ade, Some(2.0));
        assert!((lm.action_accuracy_percent.unwrap() - 400.0 / 6.0).abs() < 1e-12);
        let wp = s.head(Head::Wp).unwrap();
        assert_eq!(wp.sr_percent, 100.0);
        assert_eq!(wp.action_accuracy_percent, None);
        let t = s.table();
        assert!(t.contains("== LM head (discrete actions) =="));
        assert!(t.contains("== Waypoint head (continuous) =="));
        assert_eq!(EvalSummary::from_json(&s.to_json()).unwrap(), s);
    }

    #[test]
    fn fisher_against_enumeration() {
        fn choose(n: u64, k: u64) -> f64 {
            (0..k).fold(1.0, |acc, i| acc * (n - i) as f64 / (i + 1) as f64)
        }
        for &(a, n1, c, n2) in &[(8u64, 20u64, 2u64, 20u64), (3, 10, 0, 12), (5, 100, 1, 100), (1, 4, 1, 4)] {
            let k = a + c;
            let total = choose(n1 + n2, k);
            let p: f64 = (a..=k.min(n1)).map(|x| choose(n1, x) * choose(n2, k - x) / total).sum();
            assert!((fisher_one_sided(a, n1, c, n2) - p).abs() < 1e-9, "{a} {c}");
        }
        assert_eq!(fisher_one_sided(0, 10, 0, 10), 1.0);
    }
}
