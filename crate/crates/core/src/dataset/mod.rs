//! Training corpus: windowed samples over expert trajectories, temporal
//! relabeling ahead of critical maneuvers, template rationales, splits, the
//! reinforcement subset and corpus statistics.

mod io;
mod select;
mod stats;

use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{to_body_frame, DiscreteAction, Waypoint};
use crate::lexicon::Lexicon;
use crate::simulator::{
    generate_world, maneuver_groups, render_observation, sample_trajectory, stage_landmark, stage_of, synthesize_instruction,
    EpisodeConfig, ExpertTrajectory, Observation, SimConfig, SimError,
};
use crate::tokenizer::Vocabulary;
use crate::Waypoint64;

pub use io::{corpus_from_bytes, corpus_to_bytes, read_corpus, write_corpus, CORPUS_MAGIC, CORPUS_VERSION};
pub use select::{select_rft_subset, straight_quota, LexicalScorer, SimilarityScorer};
pub use stats::{corpus_stats, CorpusStats};

/// Frames per sample: three historical and the current one.
pub const FRAMES: usize = 4;
/// Past actions per sample.
pub const HISTORY: usize = 3;
/// Future waypoints per sample.
pub const HORIZON: usize = 3;

#[derive(Debug, Error)]
pub enum DatasetError {
    #[error("trajectory of {0} steps is too short (need at least 4)")]
    TooShort(usize),
    #[error("invalid sample {id}: {reason}")]
    InvalidSample { id: u64, reason: String },
    #[error("simulation failed: {0}")]
    Sim(#[from] SimError),
    #[error("corpus format error at byte {offset}: {reason}")]
    Format { offset: u64, reason: String },
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not enough {class} samples: need {needed}, have {available} (deficit {})", needed - available)]
    InsufficientClass {
        class: &'static str,
        needed: usize,
        available: usize,
    },
    #[error("invalid generator config: {0}")]
    Config(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    pub(crate) fn code(self) -> u8 {
        self as u8
    }

    pub(crate) fn from_code(c: u8) -> Option<Self> {
        [Split::Train, Split::Val, Split::Test].get(c as usize).copied()
    }
}

/// One supervised step of a trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectorySample {
    /// Corpus-wide id, ascending in trajectory then step order.
    pub id: u64,
    pub trajectory: u32,
    pub step: u32,
    pub instruction: String,
    /// Renders at steps `t-3..=t`, oldest first.
    pub frames: Vec<Arc<Observation>>,
    pub history_actions: [DiscreteAction; HISTORY],
    pub cot: String,
    /// Training label (after temporal relabeling).
    pub action_label: DiscreteAction,
    /// Expert action at this step.
    pub raw_label: DiscreteAction,
    /// Body-frame expert poses at `t+1..=t+3`, repeating the last pose past the end.
    pub future_waypoints: [Waypoint64; HORIZON],
    /// 1-based navigation stage.
    pub stage_index: usize,
    pub stage_count: usize,
    pub landmark: String,
}

impl TrajectorySample {
    pub fn validate(&self) -> Result<(), DatasetError> {
        let bad = |reason: &str| {
            Err(DatasetError::InvalidSample {
                id: self.id,
                reason: reason.to_string(),
            })
        };
        if self.frames.len() != FRAMES {
            return bad("expected 4 frames");
        }
        if self.cot.trim().is_empty() {
            return bad("empty rationale");
        }
        if !self.future_waypoints.iter().all(Waypoint::is_finite) {
            return bad("non-finite future waypoint");
        }
        if self.stage_index == 0 || self.stage_index > self.stage_count {
            return bad("stage index out of range");
        }
        Ok(())
    }
}

/// Rationale naming the stage, the stage landmark and the labeled maneuver.
pub fn synthesize_cot(sample: &TrajectorySample, style_seed: u64) -> String {
    let lex = Lexicon::builtin();
    let mut rng = ChaCha8Rng::seed_from_u64(style_seed);
    let tpl = &lex.rationale[rng.gen_range(0..lex.rationale.len())];
    tpl.replace("{stages}", &sample.stage_count.to_string())
        .replace("{stage}", &sample.stage_index.to_string())
        .replace("{lm}", &sample.landmark)
        .replace("{man}", sample.action_label.phrase())
}

/// One sample per step `t >= 3` of `traj`; `renders[t]` is the observation at
/// step `t`. Rationales use the sample id as style seed.
pub fn window_samples(
    traj: &ExpertTrajectory,
    renders: &[Arc<Observation>],
    trajectory: u32,
    first_id: u64,
) -> Result<Vec<TrajectorySample>, DatasetError> {
    let n = traj.len();
    if n < FRAMES {
        return Err(DatasetError::TooShort(n));
    }
    if renders.len() != n {
        return Err(DatasetError::Config(format!("{} renders for {n} steps", renders.len())));
    }
    let groups = maneuver_groups(&traj.actions);
    let mut out = Vec::with_capacity(n - HISTORY);
    for t in HISTORY..n {
        let pose = &traj.poses[t];
        let future = std::array::from_fn(|k| {
            to_body_frame(&traj.pose_clamped(t + 1 + k).as_waypoint(), pose).expect("expert poses are finite")
        });
        let stage = stage_of(&groups, t);
        let mut s = TrajectorySample {
            id: first_id + (t - HISTORY) as u64,
            trajectory,
            step: t as u32,
            instruction: traj.instruction.clone(),
            frames: renders[t + 1 - FRAMES..=t].to_vec(),
            history_actions: std::array::from_fn(|k| traj.actions[t - HISTORY + k]),
            cot: String::new(),
            action_label: traj.actions[t],
            raw_label: traj.actions[t],
            future_waypoints: future,
            stage_index: stage,
            stage_count: groups.len() + 1,
            landmark: stage_landmark(traj, &groups, stage),
        };
        s.cot = synthesize_cot(&s, s.id);
        out.push(s);
    }
    Ok(out)
}

/// Relabels raw labels: each Straight step takes the label of the first
/// critical step within the next `window` steps.
pub fn relabel(raw: &[DiscreteAction], window: usize) -> Vec<DiscreteAction> {
    (0..raw.len())
        .map(|i| {
            if raw[i].is_critical() {
                return raw[i];
            }
            raw[i + 1..raw.len().min(i + 1 + window)]
                .iter()
                .copied()
                .find(|a| a.is_critical())
                .unwrap_or(raw[i])
        })
        .collect()
}

/// Applies [`relabel`] to samples of one trajectory (in step order), starting
/// from their raw labels, and refreshes rationales of changed samples.
/// Returns the number of relabeled samples.
pub fn apply_temporal_window(samples: &mut [TrajectorySample], window: usize) -> usize {
    let raw: Vec<_> = samples.iter().map(|s| s.raw_label).collect();
    let mut changed = 0;
    for (s, label) in samples.iter_mut().zip(relabel(&raw, window)) {
        if label != s.raw_label {
            changed += 1;
        }
        if label != s.action_label {
            s.action_label = label;
            s.cot = synthesize_cot(s, s.id);
        }
    }
    changed
}

/// Corpus generation settings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub seed: u64,
    /// Train plus validation trajectories.
    pub trajectories: usize,
    pub trajectories_per_world: usize,
    pub val_fraction: f64,
    /// Trajectories from held-out worlds.
    pub test_trajectories: usize,
    pub window: usize,
    pub sim: SimConfig,
    pub episode: EpisodeConfig,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            trajectories: 300,
            trajectories_per_world: 10,
            val_fraction: 0.05,
            test_trajectories: 64,
            window: 2,
            sim: SimConfig::default(),
            episode: EpisodeConfig::default(),
        }
    }
}

/// Trajectory-level corpus entry.
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRecord {
    pub id: u32,
    pub split: Split,
    pub template_seed: u64,
    pub expert: ExpertTrajectory,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusHeader {
    pub version: u32,
    pub obs_size: u32,
    pub obs_channels: u32,
    pub lexicon_hash: String,
    pub generator: GeneratorConfig,
    /// Vocabulary dump (see [`Vocabulary::dump`]).
    pub vocabulary: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub header: CorpusHeader,
    pub trajectories: Vec<TrajectoryRecord>,
    pub samples: Vec<TrajectorySample>,
    /// Samples whose label differs from the raw expert label.
    pub relabeled: usize,
}

impl Corpus {
    pub fn vocabulary(&self) -> Result<Vocabulary, crate::tokenizer::TokenizerError> {
        Vocabulary::load(&self.header.vocabulary)
    }

    pub fn trajectory(&self, id: u32) -> Option<&TrajectoryRecord> {
        self.trajectories.iter().find(|t| t.id == id)
    }

    pub fn split_of(&self, sample: &TrajectorySample) -> Option<Split> {
        self.trajectory(sample.trajectory).map(|t| t.split)
    }

    /// Samples of the given split, in id order.
    pub fn samples_in(&self, split: Split) -> Vec<&TrajectorySample> {
        let ids: std::collections::HashSet<u32> =
            self.trajectories.iter().filter(|t| t.split == split).map(|t| t.id).collect();
        self.samples.iter().filter(|s| ids.contains(&s.trajectory)).collect()
    }

    /// Corpus restricted to one split (ids preserved).
    pub fn subset(&self, split: Split) -> Corpus {
        let trajectories: Vec<_> = self.trajectories.iter().filter(|t| t.split == split).cloned().collect();
        let samples: Vec<_> = self.samples_in(split).into_iter().cloned().collect();
        let relabeled = samples.iter().filter(|s| s.action_label != s.raw_label).count();
        Corpus {
            header: self.header.clone(),
            trajectories,
            samples,
            relabeled,
        }
    }

    pub fn validate(&self) -> Result<(), DatasetError> {
        for s in &self.samples {
            s.validate()?;
            for f in &s.frames {
                if f.size as u32 != self.header.obs_size || f.channels as u32 != self.header.obs_channels {
                    return Err(DatasetError::InvalidSample {
                        id: s.id,
                        reason: "frame shape differs from header".into(),
                    });
                }
            }
        }
        Ok(())
    }
}

fn splitmix(mut x: u64) -> u64 {
    x = x.wrapping_add(0x9E37_79B9_7F4A_7C15);
    x = (x ^ (x >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    x ^ (x >> 31)
}

/// Deterministic 64-bit mix of a seed and a stream index.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    splitmix(seed ^ splitmix(stream))
}

/// World seed for the `index`-th world; train/val worlds are even, held-out
/// test worlds odd, so the two sets never intersect.
pub fn world_seed(seed: u64, index: u64, held_out: bool) -> u64 {
    (derive_seed(seed, index) & !1) | held_out as u64
}

/// Renders every step of a trajectory with its pursuit target as the cue.
pub fn render_trajectory(world: &crate::simulator::World, traj: &ExpertTrajectory) -> Vec<Arc<Observation>> {
    traj.poses
        .iter()
        .zip(&traj.targets)
        .map(|(p, t)| Arc::new(render_observation(world, p, t)))
        .collect()
}

struct Generated {
    expert: ExpertTrajectory,
    renders: Vec<Arc<Observation>>,
}

fn generate_split(cfg: &GeneratorConfig, count: usize, held_out: bool) -> Result<Vec<Generated>, DatasetError> {
    let per = cfg.trajectories_per_world.max(1);
    let worlds = count.div_ceil(per);
    let per_world: Result<Vec<Vec<Generated>>, DatasetError> = (0..worlds)
        .into_par_iter()
        .map(|w| {
            let seed = world_seed(cfg.seed, w as u64, held_out);
            let world = generate_world(seed, &cfg.sim)?;
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 1));
            let take = per.min(count - w * per);
            (0..take)
                .map(|_| {
                    let expert = sample_trajectory(&world, &mut rng, &cfg.episode)?;
                    let renders = render_trajectory(&world, &expert);
                    Ok(Generated { expert, renders })
                })
                .collect()
        })
        .collect();
    Ok(per_world?.into_iter().flatten().collect())
}

/// Builds train/val trajectories (split by trajectory) plus held-out test
/// trajectories from disjoint worlds.
pub fn build_corpus(cfg: &GeneratorConfig) -> Result<Corpus, DatasetError> {
    if cfg.trajectories == 0 {
        return Err(DatasetError::Config("at least one trajectory is required".into()));
    }
    if !(0.0..1.0).contains(&cfg.val_fraction) {
        return Err(DatasetError::Config(format!("val_fraction {} outside [0, 1)", cfg.val_fraction)));
    }
    let main = generate_split(cfg, cfg.trajectories, false)?;
    let test = generate_split(cfg, cfg.test_trajectories, true)?;

    let n_val = (cfg.trajectories as f64 * cfg.val_fraction).round() as usize;
    let mut order: Vec<usize> = (0..cfg.trajectories).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, 2)));
    let mut splits = vec![Split::Train; cfg.trajectories];
    for &i in &order[..n_val] {
        splits[i] = Split::Val;
    }
    splits.extend(std::iter::repeat(Split::Test).take(cfg.test_trajectories));

    let lex = Lexicon::builtin();
    let channels = Observation::channel_count(lex.landmarks.len());
    let mut corpus = Corpus {
        header: CorpusHeader {
            version: CORPUS_VERSION,
            obs_size: cfg.sim.obs_size as u32,
            obs_channels: channels as u32,
            lexicon_hash: lex.hash().to_string(),
            generator: cfg.clone(),
            vocabulary: Vocabulary::builtin().dump(),
        },
        trajectories: Vec::new(),
        samples: Vec::new(),
        relabeled: 0,
    };
    for (i, (g, split)) in main.into_iter().chain(test).zip(splits).enumerate() {
        let template_seed = derive_seed(cfg.seed ^ 0x5eed, i as u64);
        let mut expert = g.expert;
        expert.instruction = synthesize_instruction(&expert, template_seed);
        let mut samples = window_samples(&expert, &g.renders, i as u32, corpus.samples.len() as u64)?;
        corpus.relabeled += apply_temporal_window(&mut samples, cfg.window);
        corpus.samples.extend(samples);
        corpus.trajectories.push(TrajectoryRecord {
            id: i as u32,
            split,
            template_seed,
            expert,
        });
    }
    corpus.validate()?;
    Ok(corpus)
}
