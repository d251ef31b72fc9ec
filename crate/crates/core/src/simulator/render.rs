//! Symbolic egocentric observations.
//!
//! Channel layout (version [`CHANNEL_LAYOUT_VERSION`]), channel-major, each a
//! `K×K` grid with row 0 farthest ahead and column 0 leftmost:
//!
//! | channel | meaning |
//! |---|---|
//! | 0 | occupancy: 1 where the cell center lies inside a building footprint |
//! | 1 | relative height: `0.5 + (h - z) / (2·ceiling)` clamped to `[0,1]`, 0 without building |
//! | 2..2+L | landmark one-hot, one channel per lexicon label |
//! | 2+L | target bearing: bilinear splat of the navigation target (weights sum to 1) |
//! | 3+L | target altitude: splat weight × `0.5 + 0.5·clamp(dz / (4·climb), -1, 1)` |
//!
//! Targets outside the window are projected onto its border along the ray
//! from the agent. The agent altitude is carried separately as `z / ceiling`.

use serde::{Deserialize, Serialize};

use super::{Pose64, Vec3d, World};
use crate::geometry::{to_body_frame, Waypoint};
use crate::lexicon::Lexicon;

pub const CHANNEL_LAYOUT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Observation {
    pub size: usize,
    pub channels: usize,
    /// `channels × size × size` values in `[0, 1]`.
    pub data: Vec<f64>,
    pub altitude: f64,
}

impl Observation {
    pub fn zeros(size: usize, channels: usize) -> Self {
        Self {
            size,
            channels,
            data: vec![0.0; size * size * channels],
            altitude: 0.0,
        }
    }

    pub fn channel_count(landmark_labels: usize) -> usize {
        4 + landmark_labels
    }

    #[inline]
    pub fn index(&self, channel: usize, row: usize, col: usize) -> usize {
        (channel * self.size + row) * self.size + col
    }

    pub fn get(&self, channel: usize, row: usize, col: usize) -> f64 {
        self.data[self.index(channel, row, col)]
    }

    pub fn channel(&self, channel: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.data[channel * n..(channel + 1) * n]
    }

    /// Flattened features fed to the model: grid values then altitude.
    pub fn feature_len(&self) -> usize {
        self.data.len() + 1
    }

    pub fn is_valid(&self) -> bool {
        self.data.len() == self.size * self.size * self.channels
            && self.data.iter().chain(std::iter::once(&self.altitude)).all(|v| v.is_finite() && (0.0..=1.0).contains(v))
    }

    /// Landmark channels with any non-zero cell, as lexicon indices.
    pub fn visible_landmarks(&self) -> Vec<usize> {
        let labels = self.channels.saturating_sub(4);
        (0..labels)
            .filter(|&l| self.channel(2 + l).iter().any(|&v| v > 0.0))
            .collect()
    }
}

/// Renders the egocentric window around `agent`; `target` is the navigation
/// cue marked in the bearing channels.
pub fn render_observation(world: &World, agent: &Pose64, target: &Vec3d) -> Observation {
    let cfg = &world.config;
    let lexicon = Lexicon::builtin();
    let k = cfg.obs_size;
    let labels = lexicon.landmarks.len();
    let mut obs = Observation::zeros(k, Observation::channel_count(labels));
    obs.altitude = (agent.position.z / cfg.altitude_ceiling).clamp(0.0, 1.0);

    let half = (k as f64 - 1.0) / 2.0;
    let (s, c) = agent.heading.sin_cos();
    let label_index = |label: &str| lexicon.landmarks.iter().position(|l| l == label);

    for row in 0..k {
        let forward = (half - row as f64) * cfg.obs_cell;
        for col in 0..k {
            let left = (half - col as f64) * cfg.obs_cell;
            let x = agent.position.x + forward * c - left * s;
            let y = agent.position.y + forward * s + left * c;
            // first building in list order wins; footprints never overlap
            if let Some(b) = world.buildings.iter().find(|b| b.contains_xy(x, y)) {
                let i = obs.index(0, row, col);
                obs.data[i] = 1.0;
                let rel = 0.5 + (b.height - agent.position.z) / (2.0 * cfg.altitude_ceiling);
                let i = obs.index(1, row, col);
                obs.data[i] = rel.clamp(0.0, 1.0);
                if let Some(li) = b.label.as_deref().and_then(label_index) {
                    let i = obs.index(2 + li, row, col);
                    obs.data[i] = 1.0;
                }
            }
        }
    }

    let target_wp = Waypoint {
        x: target.x,
        y: target.y,
        z: target.z,
        yaw: 0.0,
    };
    if let Ok(rel) = to_body_frame(&target_wp, agent) {
        let mut di = -rel.x / cfg.obs_cell;
        let mut dj = -rel.y / cfg.obs_cell;
        let m = di.abs().max(dj.abs());
        if m > half {
            di *= half / m;
            dj *= half / m;
        }
        let (gi, gj) = ((half + di).clamp(0.0, 2.0 * half), (half + dj).clamp(0.0, 2.0 * half));
        let alt = 0.5 + 0.5 * (rel.z / (4.0 * cfg.climb_step)).clamp(-1.0, 1.0);
        let (i0, j0) = (gi.floor() as usize, gj.floor() as usize);
        let (fi, fj) = (gi - i0 as f64, gj - j0 as f64);
        let bearing = 2 + labels;
        for (r, wr) in [(i0, 1.0 - fi), (i0 + 1, fi)] {
            for (cc, wc) in [(j0, 1.0 - fj), (j0 + 1, fj)] {
                let w = wr * wc;
                if r < k && cc < k && w > 0.0 {
                    let i = obs.index(bearing, r, cc);
                    obs.data[i] += w;
                    let i = obs.index(bearing + 1, r, cc);
                    obs.data[i] += w * alt;
                }
            }
        }
        for v in obs.data.iter_mut() {
            *v = v.clamp(0.0, 1.0);
        }
    }
    obs
}
