//! Expert planner: 3D A* over the occupancy grid, line-of-sight shortcutting,
//! then a pure-pursuit controller that quantizes the route into discrete
//! actions by replaying them through [`step`](super::step).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};

use super::{step, Pose64, SimConfig, SimError, Vec3d, World};
use crate::geometry::{to_body_frame, DiscreteAction, Waypoint};

/// Reference trajectory produced by [`plan_expert`].
///
/// `poses[t]` is the state before `actions[t]`; the last action is always
/// `Stop`, so `poses.len() == actions.len()`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExpertTrajectory {
    pub world_seed: u64,
    pub instruction: String,
    pub poses: Vec<Pose64>,
    pub actions: Vec<DiscreteAction>,
    pub goal: Vec3d,
    pub goal_landmark: Option<String>,
    /// Nearest labeled building at each step.
    pub visible_landmarks: Vec<Option<String>>,
    /// Shortcut A* route followed by the pursuit controller.
    pub route: Vec<Vec3d>,
    /// Pursuit target at each step (the cue rendered into observations).
    pub targets: Vec<Vec3d>,
}

impl ExpertTrajectory {
    pub fn len(&self) -> usize {
        self.actions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.actions.is_empty()
    }

    pub fn start(&self) -> &Pose64 {
        &self.poses[0]
    }

    pub fn final_pose(&self) -> &Pose64 {
        self.poses.last().expect("non-empty trajectory")
    }

    /// Number of non-straight actions (turns, climbs, descents and the final stop).
    pub fn critical_ops(&self) -> usize {
        self.actions.iter().filter(|a| a.is_critical()).count()
    }

    /// Flown distance in meters.
    pub fn path_length(&self) -> f64 {
        self.poses
            .windows(2)
            .map(|w| (w[1].position - w[0].position).norm())
            .sum()
    }

    /// Pose at step `t`, repeating the final pose past the end.
    pub fn pose_clamped(&self, t: usize) -> &Pose64 {
        &self.poses[t.min(self.poses.len() - 1)]
    }
}

/// Vertex-pursuit guidance along a polyline with monotone progress.
#[derive(Debug, Clone, PartialEq)]
pub struct RouteGuide {
    points: Vec<Vec3d>,
    cumulative: Vec<f64>,
    progress: f64,
    lookahead: f64,
}

impl RouteGuide {
    pub fn new(points: Vec<Vec3d>, lookahead: f64) -> Self {
        assert!(!points.is_empty(), "route needs at least one point");
        let mut cumulative = Vec::with_capacity(points.len());
        let mut acc = 0.0;
        cumulative.push(0.0);
        for w in points.windows(2) {
            acc += (w[1] - w[0]).norm();
            cumulative.push(acc);
        }
        Self {
            points,
            cumulative,
            progress: 0.0,
            lookahead,
        }
    }

    pub fn total_length(&self) -> f64 {
        *self.cumulative.last().unwrap()
    }

    pub fn progress(&self) -> f64 {
        self.progress
    }

    pub fn point_at(&self, s: f64) -> Vec3d {
        let s = s.clamp(0.0, self.total_length());
        for i in 0..self.points.len().saturating_sub(1) {
            let (a, b) = (self.cumulative[i], self.cumulative[i + 1]);
            if s <= b && b > a {
                return self.points[i] + (self.points[i + 1] - self.points[i]) * ((s - a) / (b - a));
            }
        }
        *self.points.last().unwrap()
    }

    /// Advances progress to the projection of `pos` and returns the first
    /// route vertex more than `lookahead` meters further along the route.
    pub fn update(&mut self, pos: &Vec3d) -> Vec3d {
        let window_end = self.progress + 3.0 * self.lookahead;
        let mut best: Option<(f64, f64)> = None;
        for i in 0..self.points.len().saturating_sub(1) {
            let (sa, sb) = (self.cumulative[i], self.cumulative[i + 1]);
            if sb < self.progress || sa > window_end || sb <= sa {
                continue;
            }
            let (a, b) = (self.points[i], self.points[i + 1]);
            let ab = b - a;
            let ap = *pos - a;
            let len2 = ab.x * ab.x + ab.y * ab.y + ab.z * ab.z;
            let t = ((ap.x * ab.x + ap.y * ab.y + ap.z * ab.z) / len2).clamp(0.0, 1.0);
            let s = (sa + t * (sb - sa)).max(self.progress);
            let d = (*pos - self.point_at(s)).norm();
            if best.map_or(true, |(bd, _)| d < bd) {
                best = Some((d, s));
            }
        }
        if let Some((_, s)) = best {
            self.progress = self.progress.max(s);
        }
        let horizon = self.progress + self.lookahead;
        self.cumulative
            .iter()
            .position(|&c| c > horizon)
            .map_or(*self.points.last().unwrap(), |i| self.points[i])
    }
}

const TURN_THRESHOLD_FRACTION: f64 = 0.9;

/// Discrete action the expert controller takes at `pose` given the pursuit
/// target and the final goal.
pub fn expert_action(cfg: &SimConfig, pose: &Pose64, target: &Vec3d, goal: &Vec3d) -> DiscreteAction {
    let to_goal = *goal - pose.position;
    let goal_h = to_goal.horizontal_norm();
    let level = cfg.climb_step / 2.0;
    let goal_bearing = to_goal.y.atan2(to_goal.x) - pose.heading;
    let goal_bearing = crate::geometry::yaw_diff(goal_bearing, 0.0);
    if to_goal.z.abs() < level
        && (goal_h < cfg.step_length
            || (goal_h < 2.0 * cfg.step_length && goal_bearing.abs() > 60f64.to_radians()))
    {
        return DiscreteAction::Stop;
    }
    let rel = to_body_frame(
        &Waypoint {
            x: target.x,
            y: target.y,
            z: target.z,
            yaw: 0.0,
        },
        pose,
    )
    .expect("finite target");
    if rel.z >= level {
        return DiscreteAction::Ascend;
    }
    if rel.z <= -level {
        return DiscreteAction::Descend;
    }
    let horizontal = (rel.x * rel.x + rel.y * rel.y).sqrt();
    let bearing = rel.y.atan2(rel.x);
    // turning flips the bearing by one turn increment; a threshold above half
    // an increment keeps the controller from chattering between headings
    if horizontal > 1e-6 && bearing.abs() > cfg.turn_radians() * TURN_THRESHOLD_FRACTION {
        if bearing > 0.0 {
            DiscreteAction::TurnLeft
        } else {
            DiscreteAction::TurnRight
        }
    } else {
        DiscreteAction::Straight
    }
}

#[derive(Clone, Copy, PartialEq)]
struct Open {
    f: f64,
    g: f64,
    node: usize,
}

impl Eq for Open {}

impl Ord for Open {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap on f, then larger g, then smaller node id
        other
            .f
            .total_cmp(&self.f)
            .then_with(|| self.g.total_cmp(&other.g))
            .then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Open {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

struct Grid3 {
    w: usize,
    h: usize,
    levels: usize,
    free: Vec<bool>,
}

impl Grid3 {
    fn build(world: &World) -> Self {
        let c = &world.config;
        let levels = ((c.altitude_ceiling - c.min_altitude) / c.climb_step).floor() as usize + 1;
        let (w, h) = (c.grid_w, c.grid_h);
        let mut column = vec![f64::NEG_INFINITY; w * h];
        for y in 0..h {
            for x in 0..w {
                let (cx, cy) = ((x as f64 + 0.5) * c.cell_size, (y as f64 + 0.5) * c.cell_size);
                if let Some(b) = world.buildings.iter().find(|b| b.contains_xy(cx, cy)) {
                    column[y * w + x] = b.height;
                }
            }
        }
        let mut free = vec![false; w * h * levels];
        for l in 0..levels {
            let z = c.min_altitude + l as f64 * c.climb_step;
            for i in 0..w * h {
                free[l * w * h + i] = z > column[i] + c.clearance;
            }
        }
        Self { w, h, levels, free }
    }

    fn id(&self, x: usize, y: usize, l: usize) -> usize {
        (l * self.h + y) * self.w + x
    }

    fn coords(&self, id: usize) -> (usize, usize, usize) {
        let x = id % self.w;
        let y = (id / self.w) % self.h;
        (x, y, id / (self.w * self.h))
    }
}

fn cell_of(world: &World, p: &Vec3d) -> Option<(usize, usize, usize)> {
    let c = &world.config;
    if !world.in_bounds(p) {
        return None;
    }
    let x = ((p.x / c.cell_size).floor() as usize).min(c.grid_w - 1);
    let y = ((p.y / c.cell_size).floor() as usize).min(c.grid_h - 1);
    let l = ((p.z - c.min_altitude) / c.climb_step).round().max(0.0) as usize;
    Some((x, y, l))
}

fn astar(world: &World, start: &Vec3d, goal: &Vec3d) -> Result<Vec<Vec3d>, SimError> {
    let c = &world.config;
    let grid = Grid3::build(world);
    let (sx, sy, sl) = cell_of(world, start).ok_or_else(|| SimError::InvalidPose("start out of bounds".into()))?;
    let (gx, gy, gl) = cell_of(world, goal).ok_or_else(|| SimError::InvalidPose("goal out of bounds".into()))?;
    if sl >= grid.levels || gl >= grid.levels {
        return Err(SimError::InvalidPose("altitude above the grid".into()));
    }
    let (s, g) = (grid.id(sx, sy, sl), grid.id(gx, gy, gl));
    if !grid.free[s] {
        return Err(SimError::InvalidPose("start cell occupied".into()));
    }
    if !grid.free[g] {
        return Err(SimError::InvalidPose("goal cell occupied".into()));
    }
    let center = |id: usize| -> Vec3d {
        let (x, y, l) = grid.coords(id);
        Vec3d::new(
            (x as f64 + 0.5) * c.cell_size,
            (y as f64 + 0.5) * c.cell_size,
            c.min_altitude + l as f64 * c.climb_step,
        )
    };
    let goal_center = center(g);
    let heuristic = |id: usize| (center(id) - goal_center).norm();

    let n = grid.free.len();
    let mut best_g = vec![f64::INFINITY; n];
    let mut parent = vec![usize::MAX; n];
    let mut closed = vec![false; n];
    let mut open = BinaryHeap::new();
    best_g[s] = 0.0;
    open.push(Open { f: heuristic(s), g: 0.0, node: s });
    while let Some(Open { g: gc, node, .. }) = open.pop() {
        if closed[node] {
            continue;
        }
        closed[node] = true;
        if node == g {
            break;
        }
        let (x, y, l) = grid.coords(node);
        let mut relax = |next: usize, cost: f64| {
            let ng = gc + cost;
            if !closed[next] && ng < best_g[next] {
                best_g[next] = ng;
                parent[next] = node;
                open.push(Open { f: ng + heuristic(next), g: ng, node: next });
            }
        };
        for (dx, dy) in [(-1i64, 0i64), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1)] {
            let (nx, ny) = (x as i64 + dx, y as i64 + dy);
            if nx < 0 || ny < 0 || nx >= grid.w as i64 || ny >= grid.h as i64 {
                continue;
            }
            let (nx, ny) = (nx as usize, ny as usize);
            let next = grid.id(nx, ny, l);
            if !grid.free[next] {
                continue;
            }
            if dx != 0 && dy != 0 && !(grid.free[grid.id(nx, y, l)] && grid.free[grid.id(x, ny, l)]) {
                continue;
            }
            let cost = if dx != 0 && dy != 0 { std::f64::consts::SQRT_2 } else { 1.0 } * c.cell_size;
            relax(next, cost);
        }
        for dl in [-1i64, 1] {
            let nl = l as i64 + dl;
            if nl < 0 || nl >= grid.levels as i64 {
                continue;
            }
            let next = grid.id(x, y, nl as usize);
            if grid.free[next] {
                relax(next, c.climb_step * c.vertical_penalty);
            }
        }
    }
    if !closed[g] {
        return Err(SimError::PlanningFailure("goal unreachable on the occupancy grid".into()));
    }
    let mut cells = vec![g];
    while *cells.last().unwrap() != s {
        cells.push(parent[*cells.last().unwrap()]);
    }
    cells.reverse();
    let mut pts: Vec<Vec3d> = cells.into_iter().map(center).collect();
    pts[0] = *start;
    if pts.len() == 1 {
        pts.push(*goal);
    } else {
        *pts.last_mut().unwrap() = *goal;
    }
    Ok(pts)
}

fn shortcut(world: &World, pts: &[Vec3d]) -> Vec<Vec3d> {
    let margin = world.config.clearance;
    let mut out = vec![pts[0]];
    let mut i = 0;
    while i + 1 < pts.len() {
        let mut j = pts.len() - 1;
        while j > i + 1 && world.segment_blocked_with_margin(&pts[i], &pts[j], margin) {
            j -= 1;
        }
        out.push(pts[j]);
        i = j;
    }
    out
}

/// Shortcut A* route between two points.
pub fn planned_route(world: &World, start: &Vec3d, goal: &Vec3d) -> Result<Vec<Vec3d>, SimError> {
    if world.point_blocked(start) {
        return Err(SimError::InvalidPose("start is blocked".into()));
    }
    if world.point_blocked(goal) {
        return Err(SimError::InvalidPose("goal is blocked".into()));
    }
    Ok(shortcut(world, &astar(world, start, goal)?))
}

/// Plans a collision-free discrete-action trajectory from `start` to `goal`.
pub fn plan_expert(world: &World, start: &Pose64, goal: &Vec3d) -> Result<ExpertTrajectory, SimError> {
    let cfg = &world.config;
    let route = planned_route(world, &start.position, goal)?;
    let mut guide = RouteGuide::new(route.clone(), cfg.lookahead);

    let mut pose = *start;
    let (mut poses, mut actions, mut targets) = (Vec::new(), Vec::new(), Vec::new());
    let mut stopped = false;
    for _ in 0..cfg.max_expert_steps {
        let target = guide.update(&pose.position);
        let action = expert_action(cfg, &pose, &target, goal);
        poses.push(pose);
        actions.push(action);
        targets.push(target);
        if action == DiscreteAction::Stop {
            stopped = true;
            break;
        }
        let out = step(world, &pose, action);
        if out.collision {
            return Err(SimError::PlanningFailure(format!(
                "pursuit collided at step {} ({})",
                actions.len() - 1,
                action
            )));
        }
        pose = out.pose;
    }
    if !stopped {
        return Err(SimError::PlanningFailure("step budget exhausted".into()));
    }
    if actions.len() < 4 {
        return Err(SimError::PlanningFailure(format!(
            "trajectory of {} steps is shorter than 4",
            actions.len()
        )));
    }
    let ne = crate::geometry::navigation_error(&pose.position, goal);
    if !crate::geometry::is_success(ne) {
        return Err(SimError::PlanningFailure(format!("expert ended {ne:.1} m from the goal")));
    }
    let visible_landmarks = poses
        .iter()
        .map(|p| world.nearest_landmark(p.position.x, p.position.y).map(str::to_string))
        .collect();
    Ok(ExpertTrajectory {
        world_seed: world.seed,
        instruction: String::new(),
        poses,
        actions,
        goal: *goal,
        goal_landmark: world.nearest_landmark(goal.x, goal.y).map(str::to_string),
        visible_landmarks,
        route,
        targets,
    })
}
