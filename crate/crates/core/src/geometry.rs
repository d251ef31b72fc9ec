//! Coordinate frames, yaw arithmetic and the navigation metrics.
//!
//! Frame convention: x forward, y left, z up (right-handed). Yaw is measured
//! counter-clockwise from the world x axis and always lives in `(-π, π]`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::scalar::Scalar;

/// Radius (meters) inside which an episode counts as successful.
pub const SUCCESS_RADIUS: f64 = 20.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("sequence length mismatch: predicted {predicted}, expert {expert}")]
    LengthMismatch { predicted: usize, expert: usize },
    #[error("empty waypoint sequence")]
    Empty,
}

/// Wraps an angle into `(-π, π]`.
pub fn wrap_yaw<S: Scalar>(theta: S) -> Result<S, GeometryError> {
    if !theta.is_finite() {
        return Err(GeometryError::NonFinite("yaw"));
    }
    Ok(wrap_finite(theta))
}

/// Infallible variant for callers that already hold finite values.
pub(crate) fn wrap_finite<S: Scalar>(theta: S) -> S {
    let pi = S::PI();
    let two_pi = pi + pi;
    let mut r = theta - two_pi * (theta / two_pi).floor();
    // r is in [0, 2π) up to rounding
    if r >= two_pi {
        r -= two_pi;
    }
    if r < S::zero() {
        r += two_pi;
    }
    if r > pi {
        r -= two_pi;
    }
    if r <= -pi {
        r = pi;
    }
    r
}

/// Shortest signed angular difference `a - b`, wrapped.
pub fn yaw_diff<S: Scalar>(a: S, b: S) -> S {
    wrap_finite(a - b)
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Vec3<S> {
    pub x: S,
    pub y: S,
    pub z: S,
}

impl<S: Scalar> Vec3<S> {
    pub fn new(x: S, y: S, z: S) -> Self {
        Self { x, y, z }
    }

    pub fn zero() -> Self {
        Self::new(S::zero(), S::zero(), S::zero())
    }

    pub fn norm(&self) -> S {
        (self.x * self.x + self.y * self.y + self.z * self.z).sqrt()
    }

    pub fn horizontal_norm(&self) -> S {
        (self.x * self.x + self.y * self.y).sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.x.is_finite() && self.y.is_finite() && self.z.is_finite()
    }

    pub fn cast<T: Scalar>(&self) -> Vec3<T> {
        Vec3::new(T::c(self.x.f64()), T::c(self.y.f64()), T::c(self.z.f64()))
    }
}

impl<S: Scalar> std::ops::Add for Vec3<S> {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self::new(self.x + o.x, self.y + o.y, self.z + o.z)
    }
}

impl<S: Scalar> std::ops::Sub for Vec3<S> {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self::new(self.x - o.x, self.y - o.y, self.z - o.z)
    }
}

impl<S: Scalar> std::ops::Mul<S> for Vec3<S> {
    type Output = Self;
    fn mul(self, k: S) -> Self {
        Self::new(self.x * k, self.y * k, self.z * k)
    }
}

/// A 3D position plus yaw; the continuous control target.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Waypoint<S> {
    pub x: S,
    pub y: S,
    pub z: S,
    pub yaw: S,
}

impl<S: Scalar> Waypoint<S> {
    /// Builds a waypoint, wrapping the yaw.
    pub fn new(x: S, y: S, z: S, yaw: S) -> Result<Self, GeometryError> {
        let wp = Self {
            x,
            y,
            z,
            yaw: wrap_yaw(yaw)?,
        };
        if !wp.position().is_finite() {
            return Err(GeometryError::NonFinite("waypoint position"));
        }
        Ok(wp)
    }

    pub fn origin() -> Self {
        Self {
            x: S::zero(),
            y: S::zero(),
            z: S::zero(),
            yaw: S::zero(),
        }
    }

    pub fn position(&self) -> Vec3<S> {
        Vec3::new(self.x, self.y, self.z)
    }

    pub fn components(&self) -> [S; 4] {
        [self.x, self.y, self.z, self.yaw]
    }

    pub fn is_finite(&self) -> bool {
        self.position().is_finite() && self.yaw.is_finite()
    }

    pub fn cast<T: Scalar>(&self) -> Waypoint<T> {
        Waypoint {
            x: T::c(self.x.f64()),
            y: T::c(self.y.f64()),
            z: T::c(self.z.f64()),
            yaw: T::c(self.yaw.f64()),
        }
    }
}

/// Agent state: position and heading.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose<S> {
    pub position: Vec3<S>,
    pub heading: S,
}

impl<S: Scalar> Pose<S> {
    pub fn new(position: Vec3<S>, heading: S) -> Result<Self, GeometryError> {
        if !position.is_finite() {
            return Err(GeometryError::NonFinite("pose position"));
        }
        Ok(Self {
            position,
            heading: wrap_yaw(heading)?,
        })
    }

    pub fn as_waypoint(&self) -> Waypoint<S> {
        Waypoint {
            x: self.position.x,
            y: self.position.y,
            z: self.position.z,
            yaw: self.heading,
        }
    }

    pub fn from_waypoint(wp: &Waypoint<S>) -> Self {
        Self {
            position: wp.position(),
            heading: wp.yaw,
        }
    }
}

/// Expresses a world-frame waypoint relative to the agent.
pub fn to_body_frame<S: Scalar>(
    world_wp: &Waypoint<S>,
    agent: &Pose<S>,
) -> Result<Waypoint<S>, GeometryError> {
    if !world_wp.is_finite() || !agent.position.is_finite() || !agent.heading.is_finite() {
        return Err(GeometryError::NonFinite("to_body_frame input"));
    }
    let d = world_wp.position() - agent.position;
    let (s, c) = agent.heading.sin_cos();
    Ok(Waypoint {
        x: c * d.x + s * d.y,
        y: -s * d.x + c * d.y,
        z: d.z,
        yaw: wrap_finite(world_wp.yaw - agent.heading),
    })
}

/// Inverse of [`to_body_frame`].
pub fn from_body_frame<S: Scalar>(
    body_wp: &Waypoint<S>,
    agent: &Pose<S>,
) -> Result<Waypoint<S>, GeometryError> {
    if !body_wp.is_finite() || !agent.position.is_finite() || !agent.heading.is_finite() {
        return Err(GeometryError::NonFinite("from_body_frame input"));
    }
    let (s, c) = agent.heading.sin_cos();
    Ok(Waypoint {
        x: agent.position.x + c * body_wp.x - s * body_wp.y,
        y: agent.position.y + s * body_wp.x + c * body_wp.y,
        z: agent.position.z + body_wp.z,
        yaw: wrap_finite(body_wp.yaw + agent.heading),
    })
}

/// Euclidean 3D distance between the final position and the goal.
pub fn navigation_error<S: Scalar>(final_pos: &Vec3<S>, goal: &Vec3<S>) -> S {
    (*final_pos - *goal).norm()
}

/// Success iff the navigation error lies inside the (inclusive) success radius.
pub fn is_success<S: Scalar>(ne: S) -> bool {
    ne <= S::c(SUCCESS_RADIUS)
}

/// Average displacement error over positions (yaw excluded).
pub fn ade<S: Scalar>(predicted: &[Waypoint<S>], expert: &[Waypoint<S>]) -> Result<S, GeometryError> {
    if predicted.len() != expert.len() {
        return Err(GeometryError::LengthMismatch {
            predicted: predicted.len(),
            expert: expert.len(),
        });
    }
    if predicted.is_empty() {
        return Err(GeometryError::Empty);
    }
    let total: S = predicted
        .iter()
        .zip(expert)
        .map(|(p, e)| (p.position() - e.position()).norm())
        .sum();
    Ok(total / S::c(predicted.len() as f64))
}

/// Discrete maneuver vocabulary of the LM head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DiscreteAction {
    Straight,
    TurnLeft,
    TurnRight,
    Ascend,
    Descend,
    Stop,
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
#[error("unknown action name `{0}`")]
pub struct UnknownAction(pub String);

impl DiscreteAction {
    pub const ALL: [DiscreteAction; 6] = [
        DiscreteAction::Straight,
        DiscreteAction::TurnLeft,
        DiscreteAction::TurnRight,
        DiscreteAction::Ascend,
        DiscreteAction::Descend,
        DiscreteAction::Stop,
    ];

    /// Single-token name used inside `<action>` tags.
    pub fn name(self) -> &'static str {
        match self {
            DiscreteAction::Straight => "straight",
            DiscreteAction::TurnLeft => "turn_left",
            DiscreteAction::TurnRight => "turn_right",
            DiscreteAction::Ascend => "ascend",
            DiscreteAction::Descend => "descend",
            DiscreteAction::Stop => "stop",
        }
    }

    /// Words used for the maneuver in free text (instructions, rationales).
    pub fn phrase(self) -> &'static str {
        match self {
            DiscreteAction::Straight => "fly straight",
            DiscreteAction::TurnLeft => "turn left",
            DiscreteAction::TurnRight => "turn right",
            DiscreteAction::Ascend => "climb up",
            DiscreteAction::Descend => "descend down",
            DiscreteAction::Stop => "stop here",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        Self::ALL.get(i).copied()
    }

    /// Any maneuver other than flying straight.
    pub fn is_critical(self) -> bool {
        self != DiscreteAction::Straight
    }
}

impl fmt::Display for DiscreteAction {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for DiscreteAction {
    type Err = UnknownAction;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| UnknownAction(s.to_string()))
    }
}
