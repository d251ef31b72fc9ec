//! Deterministic procedural urban world.
//!
//! A world is a grid of square cells holding axis-aligned buildings, some of
//! which carry a landmark label. The agent moves with fixed discrete
//! kinematics ([`step`]); an A*-plus-pursuit expert produces reference
//! trajectories ([`plan_expert`]) and a symbolic egocentric renderer stands in
//! for camera frames ([`render_observation`]).

mod episode;
mod instruction;
mod planner;
mod render;
mod world;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{DiscreteAction, Pose, Vec3};

pub use episode::{sample_trajectory, EpisodeConfig};
pub use instruction::{
    instruction_skeleton, maneuver_groups, stage_of, synthesize_instruction, ManeuverGroup, FALLBACK_LANDMARK,
};
pub(crate) use instruction::stage_landmark;
pub use planner::{expert_action, plan_expert, planned_route, ExpertTrajectory, RouteGuide};
pub use render::{render_observation, Observation, CHANNEL_LAYOUT_VERSION};
pub use world::{generate_world, Building, World};

pub type Pose64 = Pose<f64>;
pub type Vec3d = Vec3<f64>;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SimError {
    #[error("infeasible world config: {0}")]
    InfeasibleConfig(String),
    #[error("planning failed: {0}")]
    PlanningFailure(String),
    #[error("pose outside the world or inside a building: {0}")]
    InvalidPose(String),
}

/// World-generation, kinematics, rendering and expert-planner constants.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub grid_w: usize,
    pub grid_h: usize,
    /// Edge length of one world cell (meters).
    pub cell_size: f64,
    pub num_buildings: usize,
    pub min_landmarks: usize,
    /// Largest building footprint edge, in cells.
    pub max_footprint: usize,
    pub min_building_height: f64,
    pub max_building_height: f64,
    pub min_altitude: f64,
    pub altitude_ceiling: f64,
    pub cruise_altitude: f64,
    /// Straight advance per step (meters).
    pub step_length: f64,
    /// Heading change of a turn (degrees); a turn then advances half a step.
    pub turn_degrees: f64,
    /// Altitude change of ascend/descend (meters).
    pub climb_step: f64,
    /// Observation window edge, in cells (odd).
    pub obs_size: usize,
    /// Edge length of one observation cell (meters).
    pub obs_cell: f64,
    /// Pursuit lookahead along the planned route (meters).
    pub lookahead: f64,
    /// Horizontal clearance kept from building faces when shortcutting the route.
    pub clearance: f64,
    /// Cost multiplier for vertical A* moves.
    pub vertical_penalty: f64,
    pub max_expert_steps: usize,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            grid_w: 20,
            grid_h: 20,
            cell_size: 10.0,
            num_buildings: 28,
            min_landmarks: 12,
            max_footprint: 2,
            min_building_height: 12.0,
            max_building_height: 72.0,
            min_altitude: 3.0,
            altitude_ceiling: 90.0,
            cruise_altitude: 30.0,
            step_length: 5.0,
            turn_degrees: 30.0,
            climb_step: 3.0,
            obs_size: 9,
            obs_cell: 5.0,
            lookahead: 10.0,
            clearance: 3.0,
            vertical_penalty: 3.0,
            max_expert_steps: 80,
        }
    }
}

impl SimConfig {
    pub fn turn_radians(&self) -> f64 {
        self.turn_degrees.to_radians()
    }

    pub fn width_m(&self) -> f64 {
        self.grid_w as f64 * self.cell_size
    }

    pub fn height_m(&self) -> f64 {
        self.grid_h as f64 * self.cell_size
    }
}

/// Result of one kinematic step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub pose: Pose64,
    pub collision: bool,
}

/// Pose reached by applying `action` with no collision check.
pub fn kinematic_target(config: &SimConfig, agent: &Pose64, action: DiscreteAction) -> Pose64 {
    let advance = |pose: &Pose64, dist: f64| -> Vec3d {
        let (s, c) = pose.heading.sin_cos();
        Vec3d::new(
            pose.position.x + dist * c,
            pose.position.y + dist * s,
            pose.position.z,
        )
    };
    let turned = |sign: f64| -> Pose64 {
        let heading = crate::geometry::wrap_finite(agent.heading + sign * config.turn_radians());
        let rotated = Pose64 {
            position: agent.position,
            heading,
        };
        Pose64 {
            position: advance(&rotated, config.step_length / 2.0),
            heading,
        }
    };
    match action {
        DiscreteAction::Stop => *agent,
        DiscreteAction::Straight => Pose64 {
            position: advance(agent, config.step_length),
            heading: agent.heading,
        },
        DiscreteAction::TurnLeft => turned(1.0),
        DiscreteAction::TurnRight => turned(-1.0),
        DiscreteAction::Ascend | DiscreteAction::Descend => {
            let dz = if action == DiscreteAction::Ascend {
                config.climb_step
            } else {
                -config.climb_step
            };
            Pose64 {
                position: Vec3d::new(agent.position.x, agent.position.y, agent.position.z + dz),
                heading: agent.heading,
            }
        }
    }
}

/// Applies one discrete action. On collision (building hit or leaving the
/// flight volume) the pose is left unchanged and the flag is set.
pub fn step(world: &World, agent: &Pose64, action: DiscreteAction) -> StepOutcome {
    let target = kinematic_target(&world.config, agent, action);
    move_to(world, agent, target)
}

/// Moves along the straight segment to `target`, clamping on collision.
pub fn move_to(world: &World, agent: &Pose64, target: Pose64) -> StepOutcome {
    if world.segment_blocked(&agent.position, &target.position) {
        StepOutcome {
            pose: *agent,
            collision: true,
        }
    } else {
        StepOutcome {
            pose: target,
            collision: false,
        }
    }
}
