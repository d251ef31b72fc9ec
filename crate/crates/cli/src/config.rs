//! Resolved run configuration: built-in defaults, then a config file, then
//! command-line overrides.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use uavnav_core::config::{ConfigError, KvConfig};
use uavnav_core::dataset::{derive_seed, GeneratorConfig};
use uavnav_core::rewards::RewardConfig;
use uavnav_policy::eval::EvalConfig;
use uavnav_policy::grpo::RftConfig;
use uavnav_policy::sft::SftConfig;
use uavnav_policy::ModelConfig;

/// `none` or a value.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Opt<T>(Option<T>);

impl<T: fmt::Display> fmt::Display for Opt<T> {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match &self.0 {
            Some(v) => v.fmt(f),
            None => f.write_str("none"),
        }
    }
}

impl<T: FromStr> FromStr for Opt<T> {
    type Err = T::Err;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "none" {
            Ok(Opt(None))
        } else {
            s.parse().map(|v| Opt(Some(v)))
        }
    }
}

/// Model width settings; vocabulary and feature sizes come from the corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelShape {
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub prefix_per_frame: usize,
    pub context: usize,
    pub wp_hidden: usize,
    pub wp_scale: f64,
}

impl Default for ModelShape {
    fn default() -> Self {
        let s = ModelConfig::standard(0, 0);
        Self {
            hidden: s.hidden,
            heads: s.heads,
            blocks: s.blocks,
            ffn_mult: s.ffn_mult,
            prefix_per_frame: s.prefix_per_frame,
            context: s.context,
            wp_hidden: s.wp_hidden,
            wp_scale: s.wp_scale,
        }
    }
}

impl ModelShape {
    pub fn model_config(&self, vocab: usize, obs_features: usize) -> ModelConfig {
        ModelConfig {
            hidden: self.hidden,
            heads: self.heads,
            blocks: self.blocks,
            ffn_mult: self.ffn_mult,
            prefix_per_frame: self.prefix_per_frame,
            context: self.context,
            wp_hidden: self.wp_hidden,
            wp_scale: self.wp_scale,
            ..ModelConfig::standard(vocab, obs_features)
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GeneratorConfig,
    pub rft_subset_size: usize,
    pub rft_straight_fraction: f64,
    pub model: ModelShape,
    pub sft: SftConfig,
    /// Optimizer steps between resumable checkpoints.
    pub sft_checkpoint_every: usize,
    pub rft: RftConfig,
    pub rft_checkpoint_every: usize,
    pub rewards: RewardConfig,
    pub eval: EvalConfig,
    /// Caps the number of test episodes.
    pub eval_episodes: Option<usize>,
}

impl Default for RunConfig {
    fn default() -> Self {
        let mut c = Self {
            seed: 0,
            data: GeneratorConfig::default(),
            rft_subset_size: 10_000,
            rft_straight_fraction: 0.4,
            model: ModelShape::default(),
            sft: SftConfig::default(),
            sft_checkpoint_every: 50,
            rft: RftConfig::default(),
            rft_checkpoint_every: 10,
            rewards: RewardConfig::default(),
            eval: EvalConfig::default(),
            eval_episodes: None,
        };
        c.derive_seeds();
        c
    }
}

/// Visits every key with its field; `$m` is a callback macro taking
/// `(key, place, kind)` where kind is `plain` or `opt`.
macro_rules! for_each_key {
    ($m:ident, $c:expr) => {
        $m!("seed", $c.seed, plain);
        $m!("data.trajectories", $c.data.trajectories, plain);
        $m!("data.trajectories_per_world", $c.data.trajectories_per_world, plain);
        $m!("data.val_fraction", $c.data.val_fraction, plain);
        $m!("data.test_trajectories", $c.data.test_trajectories, plain);
        $m!("data.window", $c.data.window, plain);
        $m!("data.rft_subset_size", $c.rft_subset_size, plain);
        $m!("data.rft_straight_fraction", $c.rft_straight_fraction, plain);
        $m!("model.hidden", $c.model.hidden, plain);
        $m!("model.heads", $c.model.heads, plain);
        $m!("model.blocks", $c.model.blocks, plain);
        $m!("model.ffn_mult", $c.model.ffn_mult, plain);
        $m!("model.prefix_per_frame", $c.model.prefix_per_frame, plain);
        $m!("model.context", $c.model.context, plain);
        $m!("model.wp_hidden", $c.model.wp_hidden, plain);
        $m!("model.wp_scale", $c.model.wp_scale, plain);
        $m!("sft.lr", $c.sft.lr, plain);
        $m!("sft.warmup_ratio", $c.sft.warmup_ratio, plain);
        $m!("sft.weight_decay", $c.sft.weight_decay, plain);
        $m!("sft.epochs", $c.sft.epochs, plain);
        $m!("sft.micro_batch", $c.sft.micro_batch, plain);
        $m!("sft.grad_accum", $c.sft.grad_accum, plain);
        $m!("sft.log_lambda_init", $c.sft.log_lambda_init, plain);
        $m!("sft.fixed_lambda", $c.sft.fixed_lambda, opt);
        $m!("sft.beta1", $c.sft.beta1, plain);
        $m!("sft.beta2", $c.sft.beta2, plain);
        $m!("sft.eps", $c.sft.eps, plain);
        $m!("sft.val_every", $c.sft.val_every, plain);
        $m!("sft.max_steps", $c.sft.max_steps, opt);
        $m!("sft.checkpoint_every", $c.sft_checkpoint_every, plain);
        $m!("rft.lr", $c.rft.lr, plain);
        $m!("rft.beta", $c.rft.beta, plain);
        $m!("rft.group_size", $c.rft.group_size, plain);
        $m!("rft.temperature", $c.rft.temperature, plain);
        $m!("rft.top_p", $c.rft.top_p, plain);
        $m!("rft.top_k", $c.rft.top_k, plain);
        $m!("rft.micro_batch", $c.rft.micro_batch, plain);
        $m!("rft.grad_accum", $c.rft.grad_accum, plain);
        $m!("rft.clip_eps", $c.rft.clip_eps, plain);
        $m!("rft.std_floor", $c.rft.std_floor, plain);
        $m!("rft.max_new_tokens", $c.rft.max_new_tokens, plain);
        $m!("rft.warmup_ratio", $c.rft.warmup_ratio, plain);
        $m!("rft.weight_decay", $c.rft.weight_decay, plain);
        $m!("rft.epochs", $c.rft.epochs, plain);
        $m!("rft.max_steps", $c.rft.max_steps, opt);
        $m!("rft.checkpoint_every", $c.rft_checkpoint_every, plain);
        $m!("reward.format", $c.rewards.weights.format, plain);
        $m!("reward.action", $c.rewards.weights.action, plain);
        $m!("reward.grounding", $c.rewards.weights.grounding, plain);
        $m!("reward.length", $c.rewards.weights.length, plain);
        $m!("reward.length_ramp_start", $c.rewards.length.ramp_start, plain);
        $m!("reward.length_plateau_start", $c.rewards.length.plateau_start, plain);
        $m!("reward.length_plateau_end", $c.rewards.length.plateau_end, plain);
        $m!("reward.length_floor_at", $c.rewards.length.floor_at, plain);
        $m!("eval.max_steps", $c.eval.max_steps, plain);
        $m!("eval.max_new_tokens", $c.eval.max_new_tokens, plain);
        $m!("eval.collision_limit", $c.eval.collision_limit, plain);
        $m!("eval.arrival_radius", $c.eval.arrival_radius, plain);
        $m!("eval.episodes", $c.eval_episodes, opt);
    };
}

impl RunConfig {
    pub fn known_keys() -> Vec<&'static str> {
        let mut keys = Vec::new();
        let c = RunConfig::default();
        macro_rules! push {
            ($k:expr, $p:expr, $kind:ident) => {
                let _ = &$p;
                keys.push($k);
            };
        }
        for_each_key!(push, c);
        keys
    }

    /// Stage seeds follow the global seed.
    fn derive_seeds(&mut self) {
        self.data.seed = self.seed;
        self.sft.seed = derive_seed(self.seed, 1);
        self.rft.seed = derive_seed(self.seed, 2);
        self.eval.seed = derive_seed(self.seed, 3);
    }

    pub fn model_seed(&self) -> u64 {
        derive_seed(self.seed, 4)
    }

    /// Defaults overridden by `kv`; unknown keys are rejected.
    pub fn from_kv(kv: &KvConfig) -> Result<Self, ConfigError> {
        kv.check_known(&Self::known_keys())?;
        let mut c = Self::default();
        macro_rules! read {
            ($k:expr, $p:expr, plain) => {
                kv.read_into($k, &mut $p)?;
            };
            ($k:expr, $p:expr, opt) => {
                if let Some(Opt(v)) = kv.get($k)? {
                    $p = v;
                }
            };
        }
        for_each_key!(read, c);
        c.derive_seeds();
        Ok(c)
    }

    /// Every key with its resolved value.
    pub fn to_kv(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        macro_rules! write {
            ($k:expr, $p:expr, plain) => {
                kv.set($k, $p);
            };
            ($k:expr, $p:expr, opt) => {
                kv.set($k, Opt($p));
            };
        }
        for_each_key!(write, self);
        kv
    }

    pub fn render(&self) -> String {
        self.to_kv().render()
    }

    /// Defaults, then the file at `path` (if any), then `overrides`.
    pub fn resolve(path: Option<&Path>, overrides: &[String]) -> Result<Self, ResolveError> {
        let mut kv = match path {
            Some(p) => {
                let text = std::fs::read_to_string(p).map_err(|e| ResolveError::Read(format!("{}: {e}", p.display())))?;
                KvConfig::parse(&text)?
            }
            None => KvConfig::default(),
        };
        for o in overrides {
            kv.apply_override(o)?;
        }
        let c = Self::from_kv(&kv)?;
        c.validate().map_err(ResolveError::Invalid)?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), String> {
        self.sft.validate().map_err(|e| e.to_string())?;
        self.rft.validate().map_err(|e| e.to_string())?;
        self.model.model_config(16, 1).validate()?;
        if !(0.0..=1.0).contains(&self.rft_straight_fraction) {
            return Err("data.rft_straight_fraction must lie in [0, 1]".into());
        }
        if !(0.0..1.0).contains(&self.data.val_fraction) {
            return Err("data.val_fraction must lie in [0, 1)".into());
        }
        if self.data.trajectories == 0 || self.data.trajectories_per_world == 0 {
            return Err("data.trajectories and data.trajectories_per_world must be positive".into());
        }
        if self.eval.max_steps == 0 || self.eval.max_new_tokens == 0 {
            return Err("eval.max_steps and eval.max_new_tokens must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ResolveError {
    #[error("cannot read config {0}")]
    Read(String),
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("invalid config: {0}")]
    Invalid(String),
}
