//! Random start/goal sampling for corpus generation.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{plan_expert, planned_route, ExpertTrajectory, Pose64, SimError, Vec3d, World};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpisodeConfig {
    /// Horizontal start–goal distance range (meters).
    pub min_start_distance: f64,
    pub max_start_distance: f64,
    /// Uniform jitter applied to the initial heading around the route direction (degrees).
    pub heading_jitter_degrees: f64,
    /// Probability that the goal altitude differs from the cruise altitude.
    pub altitude_change_prob: f64,
    /// Distance of the goal from the landmark face (meters).
    pub goal_standoff: f64,
    pub max_attempts: usize,
}

impl Default for EpisodeConfig {
    fn default() -> Self {
        Self {
            min_start_distance: 55.0,
            max_start_distance: 95.0,
            heading_jitter_degrees: 10.0,
            altitude_change_prob: 0.1,
            goal_standoff: 6.0,
            max_attempts: 200,
        }
    }
}

/// Samples a goal beside a random landmark and a start at the configured
/// distance, then plans the expert trajectory. Retries on planning failures.
pub fn sample_trajectory<R: Rng>(world: &World, rng: &mut R, ep: &EpisodeConfig) -> Result<ExpertTrajectory, SimError> {
    let cfg = &world.config;
    let landmarks: Vec<_> = world.landmarks().collect();
    if landmarks.is_empty() {
        return Err(SimError::PlanningFailure("world has no landmarks".into()));
    }
    let mut last_err = None;
    for _ in 0..ep.max_attempts {
        let b = landmarks[rng.gen_range(0..landmarks.len())];
        let along: f64 = rng.gen_range(0.0..1.0);
        let (gx, gy) = match rng.gen_range(0..4) {
            0 => (b.min_x - ep.goal_standoff, b.min_y + along * (b.max_y - b.min_y)),
            1 => (b.max_x + ep.goal_standoff, b.min_y + along * (b.max_y - b.min_y)),
            2 => (b.min_x + along * (b.max_x - b.min_x), b.min_y - ep.goal_standoff),
            _ => (b.min_x + along * (b.max_x - b.min_x), b.max_y + ep.goal_standoff),
        };
        let mut gz = cfg.cruise_altitude;
        if rng.gen_bool(ep.altitude_change_prob) {
            let k = rng.gen_range(1..=2) as f64;
            gz += if rng.gen_bool(0.5) { k } else { -k } * cfg.climb_step;
        }
        let goal = Vec3d::new(gx, gy, gz);
        let dist = rng.gen_range(ep.min_start_distance..ep.max_start_distance);
        let angle = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
        let start = Vec3d::new(gx + dist * angle.cos(), gy + dist * angle.sin(), cfg.cruise_altitude);
        let jitter = rng.gen_range(-1.0..1.0) * ep.heading_jitter_degrees.to_radians();
        if world.point_blocked(&goal) || world.point_blocked(&start) {
            continue;
        }
        let route = match planned_route(world, &start, &goal) {
            Ok(r) => r,
            Err(e) => {
                last_err = Some(e);
                continue;
            }
        };
        let first = route[1] - route[0];
        let heading = first.y.atan2(first.x) + jitter;
        let pose = Pose64::new(start, heading).expect("finite start");
        match plan_expert(world, &pose, &goal) {
            Ok(t) => return Ok(t),
            Err(e) => last_err = Some(e),
        }
    }
    Err(last_err.unwrap_or_else(|| SimError::PlanningFailure("no valid start/goal pair sampled".into())))
}
