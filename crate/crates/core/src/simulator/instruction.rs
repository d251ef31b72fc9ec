//! Template-based navigation instructions.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::ExpertTrajectory;
use crate::geometry::DiscreteAction;
use crate::lexicon::Lexicon;

/// Label used when a world has no landmark near the maneuver.
pub const FALLBACK_LANDMARK: &str = "open plaza";

/// A run of identical critical maneuvers (stops excluded).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ManeuverGroup {
    pub start: usize,
    pub end: usize,
    pub action: DiscreteAction,
}

pub fn maneuver_groups(actions: &[DiscreteAction]) -> Vec<ManeuverGroup> {
    let mut groups: Vec<ManeuverGroup> = Vec::new();
    for (t, &a) in actions.iter().enumerate() {
        if !a.is_critical() || a == DiscreteAction::Stop {
            continue;
        }
        match groups.last_mut() {
            Some(g) if g.action == a && g.end + 1 == t => g.end = t,
            _ => groups.push(ManeuverGroup { start: t, end: t, action: a }),
        }
    }
    groups
}

/// 1-based navigation stage at step `t`: a stage ends with the last step of
/// each maneuver group.
pub fn stage_of(groups: &[ManeuverGroup], t: usize) -> usize {
    1 + groups.iter().filter(|g| g.end < t).count()
}

pub(crate) fn stage_landmark(traj: &ExpertTrajectory, groups: &[ManeuverGroup], stage: usize) -> String {
    let label = match groups.get(stage - 1) {
        Some(g) => traj.visible_landmarks[g.start].clone(),
        None => traj.goal_landmark.clone(),
    };
    label.unwrap_or_else(|| FALLBACK_LANDMARK.to_string())
}

/// Template skeleton chosen for a trajectory, e.g. `o1|m0|m2|c1`.
pub fn instruction_skeleton(traj: &ExpertTrajectory, template_seed: u64) -> String {
    compose(traj, template_seed).1
}

/// Instruction naming, in order, the landmark at each maneuver and the goal.
pub fn synthesize_instruction(traj: &ExpertTrajectory, template_seed: u64) -> String {
    compose(traj, template_seed).0
}

fn compose(traj: &ExpertTrajectory, template_seed: u64) -> (String, String) {
    let lex = Lexicon::builtin();
    let groups = maneuver_groups(&traj.actions);
    let goal = stage_landmark(traj, &groups, groups.len() + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(template_seed);
    if groups.is_empty() {
        let i = rng.gen_range(0..lex.single.len());
        return (lex.single[i].replace("{goal}", &goal), format!("s{i}"));
    }
    let fill = |tpl: &str, stage: usize, g: &ManeuverGroup| {
        tpl.replace("{lm}", &stage_landmark(traj, &groups, stage))
            .replace("{man}", g.action.phrase())
    };
    let o = rng.gen_range(0..lex.opening.len());
    let mut text = fill(&lex.opening[o], 1, &groups[0]);
    let mut skeleton = format!("o{o}");
    for (k, g) in groups.iter().enumerate().skip(1) {
        let m = rng.gen_range(0..lex.middle.len());
        text.push_str(&fill(&lex.middle[m], k + 1, g));
        skeleton.push_str(&format!("|m{m}"));
    }
    let c = rng.gen_range(0..lex.closing.len());
    text.push_str(&lex.closing[c].replace("{goal}", &goal));
    skeleton.push_str(&format!("|c{c}"));
    (text, skeleton)
}
