use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{SimConfig, SimError, Vec3d};
use crate::lexicon::Lexicon;

/// Axis-aligned building occupying whole cells, from the ground to `height`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Building {
    pub min_x: f64,
    pub min_y: f64,
    pub max_x: f64,
    pub max_y: f64,
    pub height: f64,
    pub label: Option<String>,
}

impl Building {
    pub fn contains_xy(&self, x: f64, y: f64) -> bool {
        x >= self.min_x && x <= self.max_x && y >= self.min_y && y <= self.max_y
    }

    pub fn contains(&self, p: &Vec3d) -> bool {
        self.contains_xy(p.x, p.y) && p.z >= 0.0 && p.z <= self.height
    }

    /// Horizontal distance from a point to the footprint (0 inside).
    pub fn horizontal_distance(&self, x: f64, y: f64) -> f64 {
        let dx = (self.min_x - x).max(0.0).max(x - self.max_x);
        let dy = (self.min_y - y).max(0.0).max(y - self.max_y);
        (dx * dx + dy * dy).sqrt()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.min_x + self.max_x) / 2.0, (self.min_y + self.max_y) / 2.0)
    }

    /// Slab test of the closed segment `a`–`b` against the box inflated
    /// horizontally by `margin`.
    pub fn intersects_segment(&self, a: &Vec3d, b: &Vec3d, margin: f64) -> bool {
        let lo = [self.min_x - margin, self.min_y - margin, 0.0];
        let hi = [self.max_x + margin, self.max_y + margin, self.height];
        let p = [a.x, a.y, a.z];
        let d = [b.x - a.x, b.y - a.y, b.z - a.z];
        let (mut t0, mut t1) = (0.0f64, 1.0f64);
        for axis in 0..3 {
            if d[axis].abs() < 1e-15 {
                if p[axis] < lo[axis] || p[axis] > hi[axis] {
                    return false;
                }
            } else {
                let inv = 1.0 / d[axis];
                let (mut ta, mut tb) = ((lo[axis] - p[axis]) * inv, (hi[axis] - p[axis]) * inv);
                if ta > tb {
                    std::mem::swap(&mut ta, &mut tb);
                }
                t0 = t0.max(ta);
                t1 = t1.min(tb);
                if t0 > t1 {
                    return false;
                }
            }
        }
        true
    }
}

/// Immutable procedural world.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct World {
    pub seed: u64,
    pub config: SimConfig,
    pub buildings: Vec<Building>,
}

impl World {
    pub fn in_bounds(&self, p: &Vec3d) -> bool {
        let c = &self.config;
        p.x >= 0.0
            && p.x <= c.width_m()
            && p.y >= 0.0
            && p.y <= c.height_m()
            && p.z >= c.min_altitude
            && p.z <= c.altitude_ceiling
    }

    pub fn point_blocked(&self, p: &Vec3d) -> bool {
        !self.in_bounds(p) || self.buildings.iter().any(|b| b.contains(p))
    }

    /// True if the segment leaves the flight volume or touches a building.
    pub fn segment_blocked(&self, a: &Vec3d, b: &Vec3d) -> bool {
        self.segment_blocked_with_margin(a, b, 0.0)
    }

    pub fn segment_blocked_with_margin(&self, a: &Vec3d, b: &Vec3d, margin: f64) -> bool {
        // the flight volume is convex, so checking the endpoints suffices
        if !self.in_bounds(a) || !self.in_bounds(b) {
            return true;
        }
        self.buildings.iter().any(|bd| bd.intersects_segment(a, b, margin))
    }

    pub fn landmarks(&self) -> impl Iterator<Item = &Building> {
        self.buildings.iter().filter(|b| b.label.is_some())
    }

    pub fn landmark_count(&self) -> usize {
        self.landmarks().count()
    }

    /// Label of the labeled building closest (horizontally) to a point.
    pub fn nearest_landmark(&self, x: f64, y: f64) -> Option<&str> {
        self.landmarks()
            .map(|b| (b.horizontal_distance(x, y), b))
            .min_by(|a, b| a.0.total_cmp(&b.0))
            .and_then(|(_, b)| b.label.as_deref())
    }

    pub fn building_with_label(&self, label: &str) -> Option<&Building> {
        self.buildings.iter().find(|b| b.label.as_deref() == Some(label))
    }
}

/// Generates a world deterministically from `(seed, config)`.
pub fn generate_world(seed: u64, config: &SimConfig) -> Result<World, SimError> {
    if config.grid_w == 0 || config.grid_h == 0 {
        return Err(SimError::InfeasibleConfig("grid dimensions must be positive".into()));
    }
    if !(config.cell_size > 0.0) || !(config.obs_cell > 0.0) {
        return Err(SimError::InfeasibleConfig("cell sizes must be positive".into()));
    }
    if config.obs_size % 2 == 0 || config.obs_size == 0 {
        return Err(SimError::InfeasibleConfig("observation size must be odd".into()));
    }
    let capacity = config.grid_w * config.grid_h;
    if config.num_buildings > capacity {
        return Err(SimError::InfeasibleConfig(format!(
            "{} buildings cannot be packed into {} cells",
            config.num_buildings, capacity
        )));
    }
    let lexicon = Lexicon::builtin();
    if config.min_landmarks > lexicon.landmarks.len() || config.min_landmarks > config.num_buildings {
        return Err(SimError::InfeasibleConfig(format!(
            "{} landmarks requested with {} buildings and {} labels",
            config.min_landmarks,
            config.num_buildings,
            lexicon.landmarks.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (w, h) = (config.grid_w, config.grid_h);
    let mut occupied = vec![false; capacity];
    let mut rects: Vec<(usize, usize, usize, usize)> = Vec::with_capacity(config.num_buildings);

    let fits = |occ: &[bool], x0: usize, y0: usize, bw: usize, bh: usize, gap: usize| -> bool {
        if x0 + bw > w || y0 + bh > h {
            return false;
        }
        let xs = x0.saturating_sub(gap)..(x0 + bw + gap).min(w);
        let ys = y0.saturating_sub(gap)..(y0 + bh + gap).min(h);
        ys.into_iter().all(|y| xs.clone().all(|x| !occ[y * w + x]))
    };

    for k in 0..config.num_buildings {
        // later buildings still need at least one free cell each
        let remaining = config.num_buildings - k - 1;
        let free_cells = occupied.iter().filter(|o| !**o).count();
        let mut placed = None;
        // prefer spacious placements, then tight ones, then any free cell
        'search: for gap in [1usize, 0] {
            for _ in 0..40 {
                let bw = rng.gen_range(1..=config.max_footprint.max(1));
                let bh = rng.gen_range(1..=config.max_footprint.max(1));
                let x0 = rng.gen_range(0..w);
                let y0 = rng.gen_range(0..h);
                if free_cells >= bw * bh + remaining && fits(&occupied, x0, y0, bw, bh, gap) {
                    placed = Some((x0, y0, bw, bh));
                    break 'search;
                }
            }
        }
        if placed.is_none() {
            let mut free: Vec<usize> = (0..capacity).filter(|&i| !occupied[i]).collect();
            free.shuffle(&mut rng);
            placed = free.first().map(|&i| (i % w, i / w, 1, 1));
        }
        let (x0, y0, bw, bh) = placed.ok_or_else(|| {
            SimError::InfeasibleConfig("no free cell left for building".into())
        })?;
        for y in y0..y0 + bh {
            for x in x0..x0 + bw {
                occupied[y * w + x] = true;
            }
        }
        rects.push((x0, y0, bw, bh));
    }

    let mut labels: Vec<&String> = lexicon.landmarks.iter().collect();
    labels.shuffle(&mut rng);
    let labeled = config.num_buildings.min(labels.len());
    let cs = config.cell_size;
    let buildings = rects
        .into_iter()
        .enumerate()
        .map(|(i, (x0, y0, bw, bh))| Building {
            min_x: x0 as f64 * cs,
            min_y: y0 as f64 * cs,
            max_x: (x0 + bw) as f64 * cs,
            max_y: (y0 + bh) as f64 * cs,
            height: rng.gen_range(config.min_building_height..=config.max_building_height),
            label: (i < labeled).then(|| labels[i].clone()),
        })
        .collect();

    Ok(World {
        seed,
        config: config.clone(),
        buildings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn footprint_cells(b: &Building, cs: f64) -> Vec<(i64, i64)> {
        let mut v = Vec::new();
        let (x0, y0) = ((b.min_x / cs).round() as i64, (b.min_y / cs).round() as i64);
        let (x1, y1) = ((b.max_x / cs).round() as i64, (b.max_y / cs).round() as i64);
        for y in y0..y1 {
            for x in x0..x1 {
                v.push((x, y));
            }
        }
        v
    }

    #[test]
    fn deterministic_per_seed() {
        let c = SimConfig::default();
        assert_eq!(generate_world(7, &c).unwrap(), generate_world(7, &c).unwrap());
        assert_ne!(generate_world(7, &c).unwrap(), generate_world(8, &c).unwrap());
    }

    #[test]
    fn zero_buildings_is_empty() {
        let c = SimConfig {
            num_buildings: 0,
            min_landmarks: 0,
            ..SimConfig::default()
        };
        let w = generate_world(1, &c).unwrap();
        assert!(w.buildings.is_empty());
    }

    #[test]
    fn buildings_disjoint_inside_grid_with_unique_labels() {
        let c = SimConfig::default();
        for seed in 0..20 {
            let w = generate_world(seed, &c).unwrap();
            assert_eq!(w.buildings.len(), c.num_buildings);
            assert!(w.landmark_count() >= c.min_landmarks);
            let mut cells = std::collections::HashSet::new();
            for b in &w.buildings {
                assert!(b.min_x >= 0.0 && b.max_x <= c.width_m());
                assert!(b.min_y >= 0.0 && b.max_y <= c.height_m());
                for cell in footprint_cells(b, c.cell_size) {
                    assert!(cells.insert(cell), "overlap in seed {seed}");
                }
            }
            let labels: Vec<_> = w.landmarks().map(|b| b.label.clone().unwrap()).collect();
            let unique: std::collections::HashSet<_> = labels.iter().collect();
            assert_eq!(unique.len(), labels.len());
        }
    }

    /// Exhaustive oracle: the largest number of pairwise disjoint non-empty
    /// cell rectangles that fit in a w×h grid.
    fn max_packable(w: usize, h: usize) -> usize {
        fn rects(w: usize, h: usize) -> Vec<u32> {
            let mut out = Vec::new();
            for x0 in 0..w {
                for y0 in 0..h {
                    for x1 in x0 + 1..=w {
                        for y1 in y0 + 1..=h {
                            let mut m = 0u32;
                            for y in y0..y1 {
                                for x in x0..x1 {
                                    m |= 1 << (y * w + x);
                                }
                            }
                            out.push(m);
                        }
                    }
                }
            }
            out
        }
        fn best(rs: &[u32], used: u32, from: usize) -> usize {
            let mut b = 0;
            for i in from..rs.len() {
                if rs[i] & used == 0 {
                    b = b.max(1 + best(rs, used | rs[i], i + 1));
                }
            }
            b
        }
        best(&rects(w, h), 0, 0)
    }

    #[test]
    fn packing_capacity_matches_exhaustive_oracle() {
        let cap = max_packable(2, 2);
        assert_eq!(cap, 4);
        let base = SimConfig {
            grid_w: 2,
            grid_h: 2,
            min_landmarks: 0,
            ..SimConfig::default()
        };
        for n in 0..=cap + 2 {
            let c = SimConfig {
                num_buildings: n,
                ..base.clone()
            };
            assert_eq!(generate_world(11, &c).is_ok(), n <= cap, "n = {n}");
        }
    }

    #[test]
    fn infeasible_configs_rejected() {
        let c = SimConfig {
            grid_w: 0,
            ..SimConfig::default()
        };
        assert!(matches!(generate_world(0, &c), Err(SimError::InfeasibleConfig(_))));
        let c = SimConfig {
            min_landmarks: 25,
            num_buildings: 30,
            ..SimConfig::default()
        };
        assert!(generate_world(0, &c).is_err());
    }

    fn sampled_hit(b: &Building, a: &Vec3d, c: &Vec3d, grow: f64) -> bool {
        (0..=4000).any(|i| {
            let p = *a + (*c - *a) * (i as f64 / 4000.0);
            p.x >= b.min_x - grow
                && p.x <= b.max_x + grow
                && p.y >= b.min_y - grow
                && p.y <= b.max_y + grow
                && p.z >= -grow
                && p.z <= b.height + grow
        })
    }

    proptest! {
        #[test]
        fn slab_test_agrees_with_dense_sampling(
            a in prop::array::uniform3(0.0f64..40.0),
            c in prop::array::uniform3(0.0f64..40.0),
        ) {
            let b = Building { min_x: 12.0, min_y: 15.0, max_x: 25.0, max_y: 22.0, height: 18.0, label: None };
            let (a, c) = (Vec3d::new(a[0], a[1], a[2]), Vec3d::new(c[0], c[1], c[2]));
            let exact = b.intersects_segment(&a, &c, 0.0);
            if sampled_hit(&b, &a, &c, 0.0) {
                prop_assert!(exact);
            }
            if exact {
                // samples are at most ~0.02 m apart
                prop_assert!(sampled_hit(&b, &a, &c, 0.05));
            }
        }
    }
}
