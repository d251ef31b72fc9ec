//! Dual-head decoder-only transformer.
//!
//! Each of the four observation frames is projected into a fixed number of
//! prefix embeddings (temporal order, oldest first); the token embeddings
//! follow. Pre-norm causal blocks produce one hidden state per position, read
//! in parallel by the language head (every text position) and the waypoint
//! head (the three slot positions, concatenated).

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;
use uavnav_core::simulator::Observation;
use uavnav_core::Scalar;

use crate::tensor::{
    axpy, dot, gelu, gelu_grad, layer_norm, layer_norm_backward, linear, linear_backward, softmax_in_place, Group, Tensor,
};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("expected {expected} frames, got {got}")]
    FrameCount { expected: usize, got: usize },
    #[error("frame feature index {index} outside {features} features")]
    FrameFeature { index: usize, features: usize },
    #[error("sequence of {len} positions exceeds context {context}")]
    TooLong { len: usize, context: usize },
    #[error("token id {0} outside the vocabulary")]
    BadToken(u32),
    #[error("slot position {0} outside the token sequence")]
    BadSlot(usize),
    #[error("empty token sequence")]
    Empty,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub vocab: usize,
    /// Flattened observation width (grid values plus altitude).
    pub obs_features: usize,
    pub hidden: usize,
    pub heads: usize,
    pub blocks: usize,
    pub ffn_mult: usize,
    pub frames: usize,
    pub prefix_per_frame: usize,
    pub context: usize,
    pub wp_hidden: usize,
    /// Meters per unit of raw waypoint-head position output.
    pub wp_scale: f64,
}

impl ModelConfig {
    /// Hidden 128, 4 heads, 4 blocks, 16 prefix embeddings, context 256.
    pub fn standard(vocab: usize, obs_features: usize) -> Self {
        Self {
            vocab,
            obs_features,
            hidden: 128,
            heads: 4,
            blocks: 4,
            ffn_mult: 4,
            frames: 4,
            prefix_per_frame: 4,
            context: 256,
            wp_hidden: 128,
            wp_scale: 5.0,
        }
    }

    /// Small trunk for CPU experiments and tests.
    pub fn tiny(vocab: usize, obs_features: usize) -> Self {
        Self {
            hidden: 32,
            heads: 2,
            blocks: 2,
            wp_hidden: 64,
            ..Self::standard(vocab, obs_features)
        }
    }

    pub fn prefix_len(&self) -> usize {
        self.frames * self.prefix_per_frame
    }

    pub fn validate(&self) -> Result<(), String> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(format!("hidden {} must be a positive multiple of heads {}", self.hidden, self.heads));
        }
        if self.vocab < 10 || self.obs_features == 0 || self.frames == 0 || self.prefix_per_frame == 0 {
            return Err("vocab, features, frames and prefix must be positive".into());
        }
        if self.context <= self.prefix_len() {
            return Err("context must exceed the observation prefix".into());
        }
        Ok(())
    }
}

/// Non-zero entries of a flattened observation (grid values, then altitude).
#[derive(Debug, Clone, PartialEq)]
pub struct SparseFrame {
    pub entries: Vec<(u32, f64)>,
}

impl SparseFrame {
    pub fn from_observation(obs: &Observation) -> Self {
        let mut entries: Vec<(u32, f64)> = obs
            .data
            .iter()
            .enumerate()
            .filter(|(_, v)| **v != 0.0)
            .map(|(i, v)| (i as u32, *v))
            .collect();
        if obs.altitude != 0.0 {
            entries.push((obs.data.len() as u32, obs.altitude));
        }
        Self { entries }
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockIx {
    ln1_g: usize,
    ln1_b: usize,
    wqkv: usize,
    bqkv: usize,
    wo: usize,
    bo: usize,
    ln2_g: usize,
    ln2_b: usize,
    w1: usize,
    b1: usize,
    w2: usize,
    b2: usize,
}

#[derive(Debug, Clone, PartialEq)]
struct Ix {
    obs_w: usize,
    obs_b: usize,
    frame_emb: usize,
    tok_emb: usize,
    pos_emb: usize,
    blocks: Vec<BlockIx>,
    lnf_g: usize,
    lnf_b: usize,
    lm_w: usize,
    lm_b: usize,
    wp_w1: usize,
    wp_b1: usize,
    wp_w2: usize,
    wp_b2: usize,
}

/// Predicted body-frame waypoints, `[x, y, z, yaw]` per future step.
pub type Waypoints<S> = [[S; 4]; 3];

#[derive(Debug, Clone)]
pub struct ForwardOutput<S> {
    /// `(text length) × vocab` logits; row `t` predicts token `t + 1`.
    pub logits: Vec<S>,
    pub waypoints: Option<Waypoints<S>>,
    /// Concatenated hidden states at the three slots.
    pub slot_hidden: Option<Vec<S>>,
}

#[derive(Debug, Clone)]
struct BlockCache<S> {
    x_in: Vec<S>,
    ln1: Vec<S>,
    ln1_stats: Vec<(S, S)>,
    qkv: Vec<S>,
    probs: Vec<S>,
    attn: Vec<S>,
    x_mid: Vec<S>,
    ln2: Vec<S>,
    ln2_stats: Vec<(S, S)>,
    h_pre: Vec<S>,
    h_act: Vec<S>,
}

#[derive(Debug, Clone)]
struct WpCache<S> {
    slots: [usize; 3],
    z: Vec<S>,
    u: Vec<S>,
    g: Vec<S>,
    o: Vec<S>,
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache<S> {
    frames: Vec<SparseFrame>,
    tokens: Vec<u32>,
    blocks: Vec<BlockCache<S>>,
    x_final: Vec<S>,
    lnf_stats: Vec<(S, S)>,
    y: Vec<S>,
    wp: Option<WpCache<S>>,
}

/// Gradients aligned with [`DualHeadModel::params`].
pub type Grads<S> = Vec<Vec<S>>;

#[derive(Debug, Clone, PartialEq)]
pub struct DualHeadModel<S> {
    pub config: ModelConfig,
    pub params: Vec<Tensor<S>>,
    ix: Ix,
}

struct Builder<S> {
    params: Vec<Tensor<S>>,
}

impl<S: Scalar> Builder<S> {
    fn add(&mut self, name: String, shape: &[usize], group: Group) -> usize {
        self.params.push(Tensor::zeros(name, shape, group));
        self.params.len() - 1
    }
}

impl<S: Scalar> DualHeadModel<S> {
    /// Builds the parameter layout with all tensors zero.
    pub fn zeros(config: ModelConfig) -> Result<Self, String> {
        config.validate()?;
        let c = &config;
        let (h, f) = (c.hidden, c.hidden * c.ffn_mult);
        let mut b = Builder { params: Vec::new() };
        let lm = Group::Lm;
        let obs_w = b.add("obs.w".into(), &[c.obs_features, c.prefix_per_frame * h], lm);
        let obs_b = b.add("obs.b".into(), &[c.prefix_per_frame * h], lm);
        let frame_emb = b.add("obs.frame_emb".into(), &[c.prefix_len(), h], lm);
        let tok_emb = b.add("tok_emb".into(), &[c.vocab, h], lm);
        let pos_emb = b.add("pos_emb".into(), &[c.context, h], lm);
        let blocks = (0..c.blocks)
            .map(|i| BlockIx {
                ln1_g: b.add(format!("blocks.{i}.ln1.g"), &[h], lm),
                ln1_b: b.add(format!("blocks.{i}.ln1.b"), &[h], lm),
                wqkv: b.add(format!("blocks.{i}.attn.wqkv"), &[h, 3 * h], lm),
                bqkv: b.add(format!("blocks.{i}.attn.bqkv"), &[3 * h], lm),
                wo: b.add(format!("blocks.{i}.attn.wo"), &[h, h], lm),
                bo: b.add(format!("blocks.{i}.attn.bo"), &[h], lm),
                ln2_g: b.add(format!("blocks.{i}.ln2.g"), &[h], lm),
                ln2_b: b.add(format!("blocks.{i}.ln2.b"), &[h], lm),
                w1: b.add(format!("blocks.{i}.mlp.w1"), &[h, f], lm),
                b1: b.add(format!("blocks.{i}.mlp.b1"), &[f], lm),
                w2: b.add(format!("blocks.{i}.mlp.w2"), &[f, h], lm),
                b2: b.add(format!("blocks.{i}.mlp.b2"), &[h], lm),
            })
            .collect();
        let lnf_g = b.add("lnf.g".into(), &[h], lm);
        let lnf_b = b.add("lnf.b".into(), &[h], lm);
        let lm_w = b.add("lm_head.w".into(), &[h, c.vocab], lm);
        let lm_b = b.add("lm_head.b".into(), &[c.vocab], lm);
        let wp = Group::Wp;
        let wp_w1 = b.add("wp_head.w1".into(), &[3 * h, c.wp_hidden], wp);
        let wp_b1 = b.add("wp_head.b1".into(), &[c.wp_hidden], wp);
        let wp_w2 = b.add("wp_head.w2".into(), &[c.wp_hidden, 12], wp);
        let wp_b2 = b.add("wp_head.b2".into(), &[12], wp);
        Ok(Self {
            config,
            params: b.params,
            ix: Ix {
                obs_w,
                obs_b,
                frame_emb,
                tok_emb,
                pos_emb,
                blocks,
                lnf_g,
                lnf_b,
                lm_w,
                lm_b,
                wp_w1,
                wp_b1,
                wp_w2,
                wp_b2,
            },
        })
    }

    /// Random initialization: normal(0, 0.02) weights, residual outputs
    /// scaled down by depth, unit layer-norm gains, zero biases.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self, String> {
        let mut m = Self::zeros(config)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let depth = (2 * m.config.blocks) as f64;
        let wp_in = (3 * m.config.hidden) as f64;
        for t in &mut m.params {
            let name = t.name.as_str();
            let std = if name.ends_with(".g") {
                t.data.iter_mut().for_each(|v| *v = S::one());
                continue;
            } else if t.shape.len() < 2 {
                continue;
            } else if name.ends_with("attn.wo") || name.ends_with("mlp.w2") {
                0.02 / depth.sqrt()
            } else if name == "wp_head.w1" {
                1.0 / wp_in.sqrt()
            } else {
                0.02
            };
            let dist = Normal::new(0.0, std).expect("positive std");
            t.data.iter_mut().for_each(|v| *v = S::c(dist.sample(&mut rng)));
        }
        Ok(m)
    }

    pub fn param(&self, name: &str) -> Option<&Tensor<S>> {
        self.params.iter().find(|t| t.name == name)
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(Tensor::len).sum()
    }

    pub fn zero_grads(&self) -> Grads<S> {
        self.params.iter().map(|t| vec![S::zero(); t.len()]).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.params.iter().all(Tensor::is_finite)
    }

    /// Same model in another precision.
    pub fn cast<T: Scalar>(&self) -> DualHeadModel<T> {
        DualHeadModel {
            config: self.config.clone(),
            params: self.params.iter().map(Tensor::cast).collect(),
            ix: self.ix.clone(),
        }
    }

    /// Order-sensitive SHA-256 over the parameters of `group`.
    pub fn group_checksum(&self, group: Group) -> String {
        use sha2::{Digest, Sha256};
        let mut h = Sha256::new();
        for t in self.params.iter().filter(|t| t.group == group) {
            h.update(t.name.as_bytes());
            for v in &t.data {
                h.update(v.f64().to_le_bytes());
            }
        }
        h.finalize().iter().map(|b| format!("{b:02x}")).collect()
    }

    fn p(&self, i: usize) -> &[S] {
        &self.params[i].data
    }

    fn check_inputs(&self, frames: &[SparseFrame], tokens: &[u32]) -> Result<(), ModelError> {
        let c = &self.config;
        if frames.len() != c.frames {
            return Err(ModelError::FrameCount {
                expected: c.frames,
                got: frames.len(),
            });
        }
        for f in frames {
            if let Some(&(i, _)) = f.entries.iter().find(|(i, _)| *i as usize >= c.obs_features) {
                return Err(ModelError::FrameFeature {
                    index: i as usize,
                    features: c.obs_features,
                });
            }
        }
        if tokens.is_empty() {
            return Err(ModelError::Empty);
        }
        let len = c.prefix_len() + tokens.len();
        if len > c.context {
            return Err(ModelError::TooLong { len, context: c.context });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.vocab) {
            return Err(ModelError::BadToken(t));
        }
        Ok(())
    }

    /// Input embedding of prefix position `p`.
    fn prefix_embedding(&self, frames: &[SparseFrame], p: usize) -> Vec<S> {
        let h = self.config.hidden;
        let ppf = self.config.prefix_per_frame;
        let (f, j) = (p / ppf, p % ppf);
        let width = ppf * h;
        let mut x = self.p(self.ix.obs_b)[j * h..(j + 1) * h].to_vec();
        let w = self.p(self.ix.obs_w);
        for &(i, v) in &frames[f].entries {
            let row = i as usize * width + j * h;
            axpy(&mut x, S::c(v), &w[row..row + h]);
        }
        axpy(&mut x, S::one(), &self.p(self.ix.frame_emb)[p * h..(p + 1) * h]);
        axpy(&mut x, S::one(), &self.p(self.ix.pos_emb)[p * h..(p + 1) * h]);
        x
    }

    fn token_embedding(&self, token: u32, pos: usize) -> Vec<S> {
        let h = self.config.hidden;
        let t = token as usize;
        let mut x = self.p(self.ix.tok_emb)[t * h..(t + 1) * h].to_vec();
        axpy(&mut x, S::one(), &self.p(self.ix.pos_emb)[pos * h..(pos + 1) * h]);
        x
    }

    /// Full forward pass. With `slots`, the waypoint head reads the hidden
    /// states at those text positions.
    pub fn forward(
        &self,
        frames: &[SparseFrame],
        tokens: &[u32],
        slots: Option<[usize; 3]>,
    ) -> Result<(ForwardOutput<S>, ForwardCache<S>), ModelError> {
        self.check_inputs(frames, tokens)?;
        if let Some(s) = slots {
            if let Some(&bad) = s.iter().find(|&&p| p >= tokens.len()) {
                return Err(ModelError::BadSlot(bad));
            }
        }
        let c = &self.config;
        let (h, pre) = (c.hidden, c.prefix_len());
        let t_all = pre + tokens.len();
        let mut x = Vec::with_capacity(t_all * h);
        for p in 0..pre {
            x.extend(self.prefix_embedding(frames, p));
        }
        for (k, &tok) in tokens.iter().enumerate() {
            x.extend(self.token_embedding(tok, pre + k));
        }
        let mut caches = Vec::with_capacity(c.blocks);
        for b in &self.ix.blocks {
            let (nx, cache) = self.block_forward(b, x, t_all);
            x = nx;
            caches.push(cache);
        }
        let (y, lnf_stats) = layer_norm(&x, self.p(self.ix.lnf_g), self.p(self.ix.lnf_b), t_all, h);
        let n = tokens.len();
        let logits = linear(&y[pre * h..], self.p(self.ix.lm_w), self.p(self.ix.lm_b), n, h, c.vocab);
        let (waypoints, slot_hidden, wp) = match slots {
            Some(s) => {
                let z: Vec<S> = s.iter().flat_map(|&p| y[(pre + p) * h..(pre + p + 1) * h].iter().copied()).collect();
                let (wps, cache) = self.wp_head_forward(&z, s);
                (Some(wps), Some(z), Some(cache))
            }
            None => (None, None, None),
        };
        Ok((
            ForwardOutput {
                logits,
                waypoints,
                slot_hidden,
            },
            ForwardCache {
                frames: frames.to_vec(),
                tokens: tokens.to_vec(),
                blocks: caches,
                x_final: x,
                lnf_stats,
                y,
                wp,
            },
        ))
    }

    /// Waypoint head applied to hidden states `hidden` (`positions × hidden`,
    /// text positions only) at `slots`.
    pub fn waypoint_head(&self, hidden: &[S], slots: [usize; 3]) -> Waypoints<S> {
        let h = self.config.hidden;
        let z: Vec<S> = slots.iter().flat_map(|&p| hidden[p * h..(p + 1) * h].iter().copied()).collect();
        self.wp_head_forward(&z, slots).0
    }

    fn wp_head_forward(&self, z: &[S], slots: [usize; 3]) -> (Waypoints<S>, WpCache<S>) {
        let c = &self.config;
        let u = linear(z, self.p(self.ix.wp_w1), self.p(self.ix.wp_b1), 1, 3 * c.hidden, c.wp_hidden);
        let g: Vec<S> = u.iter().map(|&v| gelu(v)).collect();
        let o = linear(&g, self.p(self.ix.wp_w2), self.p(self.ix.wp_b2), 1, c.wp_hidden, 12);
        let scale = S::c(c.wp_scale);
        let wps = std::array::from_fn(|k| {
            [
                scale * o[4 * k],
                scale * o[4 * k + 1],
                scale * o[4 * k + 2],
                S::PI() * o[4 * k + 3].tanh(),
            ]
        });
        (
            wps,
            WpCache {
                slots,
                z: z.to_vec(),
                u,
                g,
                o,
            },
        )
    }

    fn block_forward(&self, b: &BlockIx, x: Vec<S>, t: usize) -> (Vec<S>, BlockCache<S>) {
        let c = &self.config;
        let h = c.hidden;
        let f = h * c.ffn_mult;
        let (ln1, ln1_stats) = layer_norm(&x, self.p(b.ln1_g), self.p(b.ln1_b), t, h);
        let qkv = linear(&ln1, self.p(b.wqkv), self.p(b.bqkv), t, h, 3 * h);
        let (attn, probs) = self.attention(&qkv, t);
        let proj = linear(&attn, self.p(b.wo), self.p(b.bo), t, h, h);
        let x_mid: Vec<S> = x.iter().zip(&proj).map(|(&a, &p)| a + p).collect();
        let (ln2, ln2_stats) = layer_norm(&x_mid, self.p(b.ln2_g), self.p(b.ln2_b), t, h);
        let h_pre = linear(&ln2, self.p(b.w1), self.p(b.b1), t, h, f);
        let h_act: Vec<S> = h_pre.iter().map(|&v| gelu(v)).collect();
        let mlp = linear(&h_act, self.p(b.w2), self.p(b.b2), t, f, h);
        let out = x_mid.iter().zip(&mlp).map(|(&a, &m)| a + m).collect();
        (
            out,
            BlockCache {
                x_in: x,
                ln1,
                ln1_stats,
                qkv,
                probs,
                attn,
                x_mid,
                ln2,
                ln2_stats,
                h_pre,
                h_act,
            },
        )
    }

    /// Causal multi-head attention; returns concatenated head outputs and the
    /// `heads × t × t` probabilities (zero above the diagonal).
    fn attention(&self, qkv: &[S], t: usize) -> (Vec<S>, Vec<S>) {
        let c = &self.config;
        let (h, nh) = (c.hidden, c.heads);
        let dh = h / nh;
        let scale = S::one() / S::c(dh as f64).sqrt();
        let mut out = vec![S::zero(); t * h];
        let mut probs = vec![S::zero(); nh * t * t];
        for hd in 0..nh {
            let off = hd * dh;
            for i in 0..t {
                let q = &qkv[i * 3 * h + off..i * 3 * h + off + dh];
                let row = &mut probs[(hd * t + i) * t..(hd * t + i) * t + i + 1];
                for (j, r) in row.iter_mut().enumerate() {
                    let k = &qkv[j * 3 * h + h + off..j * 3 * h + h + off + dh];
                    *r = dot(q, k) * scale;
                }
                softmax_in_place(row);
                let o = &mut out[i * h + off..i * h + off + dh];
                for (j, &p) in row.iter().enumerate() {
                    let v = &qkv[j * 3 * h + 2 * h + off..j * 3 * h + 2 * h + off + dh];
                    axpy(o, p, v);
                }
            }
        }
        (out, probs)
    }

    /// Accumulates parameter gradients of `Σ dlogits·logits + Σ dwp·waypoints`
    /// into `grads`. Either upstream gradient may be absent.
    pub fn backward(&self, cache: &ForwardCache<S>, dlogits: Option<&[S]>, dwp: Option<&Waypoints<S>>, grads: &mut Grads<S>) {
        let c = &self.config;
        let (h, pre, v) = (c.hidden, c.prefix_len(), c.vocab);
        let n = cache.tokens.len();
        let t_all = pre + n;
        let mut dy = vec![S::zero(); t_all * h];

        if let (Some(dwp), Some(wc)) = (dwp, cache.wp.as_ref()) {
            let scale = S::c(c.wp_scale);
            let mut d_o = vec![S::zero(); 12];
            for k in 0..3 {
                for j in 0..3 {
                    d_o[4 * k + j] = scale * dwp[k][j];
                }
                let th = wc.o[4 * k + 3].tanh();
                d_o[4 * k + 3] = S::PI() * (S::one() - th * th) * dwp[k][3];
            }
            let mut dg = vec![S::zero(); c.wp_hidden];
            let (a, b) = split_two(grads, self.ix.wp_w2, self.ix.wp_b2);
            linear_backward(&d_o, &wc.g, self.p(self.ix.wp_w2), a, b, Some(&mut dg), 1, c.wp_hidden, 12);
            let du: Vec<S> = dg.iter().zip(&wc.u).map(|(&d, &u)| d * gelu_grad(u)).collect();
            let mut dz = vec![S::zero(); 3 * h];
            let (a, b) = split_two(grads, self.ix.wp_w1, self.ix.wp_b1);
            linear_backward(&du, &wc.z, self.p(self.ix.wp_w1), a, b, Some(&mut dz), 1, 3 * h, c.wp_hidden);
            for (k, &p) in wc.slots.iter().enumerate() {
                axpy(&mut dy[(pre + p) * h..(pre + p + 1) * h], S::one(), &dz[k * h..(k + 1) * h]);
            }
        }
        if let Some(dl) = dlogits {
            assert_eq!(dl.len(), n * v, "logit gradient shape");
            let (a, b) = split_two(grads, self.ix.lm_w, self.ix.lm_b);
            linear_backward(dl, &cache.y[pre * h..], self.p(self.ix.lm_w), a, b, Some(&mut dy[pre * h..]), n, h, v);
        }

        let mut dx = vec![S::zero(); t_all * h];
        {
            let (a, b) = split_two(grads, self.ix.lnf_g, self.ix.lnf_b);
            layer_norm_backward(&dy, &cache.x_final, &cache.lnf_stats, self.p(self.ix.lnf_g), &mut dx, a, b, h);
        }
        for (bix, bc) in self.ix.blocks.iter().zip(&cache.blocks).rev() {
            dx = self.block_backward(bix, bc, dx, t_all, grads);
        }

        // embeddings
        let ppf = c.prefix_per_frame;
        let width = ppf * h;
        for p in 0..t_all {
            let d = &dx[p * h..(p + 1) * h];
            axpy(&mut grads[self.ix.pos_emb][p * h..(p + 1) * h], S::one(), d);
            if p < pre {
                axpy(&mut grads[self.ix.frame_emb][p * h..(p + 1) * h], S::one(), d);
                let (f, j) = (p / ppf, p % ppf);
                axpy(&mut grads[self.ix.obs_b][j * h..(j + 1) * h], S::one(), d);
                let gw = &mut grads[self.ix.obs_w];
                for &(i, val) in &cache.frames[f].entries {
                    let row = i as usize * width + j * h;
                    axpy(&mut gw[row..row + h], S::c(val), d);
                }
            } else {
                let tok = cache.tokens[p - pre] as usize;
                axpy(&mut grads[self.ix.tok_emb][tok * h..(tok + 1) * h], S::one(), d);
            }
        }
    }

    fn block_backward(&self, b: &BlockIx, bc: &BlockCache<S>, dout: Vec<S>, t: usize, grads: &mut Grads<S>) -> Vec<S> {
        let c = &self.config;
        let (h, nh) = (c.hidden, c.heads);
        let f = h * c.ffn_mult;
        let dh = h / nh;

        // mlp branch
        let mut dh_act = vec![S::zero(); t * f];
        {
            let (a, bb) = split_two(grads, b.w2, b.b2);
            linear_backward(&dout, &bc.h_act, self.p(b.w2), a, bb, Some(&mut dh_act), t, f, h);
        }
        let dh_pre: Vec<S> = dh_act.iter().zip(&bc.h_pre).map(|(&d, &x)| d * gelu_grad(x)).collect();
        let mut dln2 = vec![S::zero(); t * h];
        {
            let (a, bb) = split_two(grads, b.w1, b.b1);
            linear_backward(&dh_pre, &bc.ln2, self.p(b.w1), a, bb, Some(&mut dln2), t, h, f);
        }
        let mut dx_mid = dout;
        {
            let (a, bb) = split_two(grads, b.ln2_g, b.ln2_b);
            layer_norm_backward(&dln2, &bc.x_mid, &bc.ln2_stats, self.p(b.ln2_g), &mut dx_mid, a, bb, h);
        }

        // attention branch
        let mut dattn = vec![S::zero(); t * h];
        {
            let (a, bb) = split_two(grads, b.wo, b.bo);
            linear_backward(&dx_mid, &bc.attn, self.p(b.wo), a, bb, Some(&mut dattn), t, h, h);
        }
        let scale = S::one() / S::c(dh as f64).sqrt();
        let mut dqkv = vec![S::zero(); t * 3 * h];
        let mut dp = vec![S::zero(); t];
        for hd in 0..nh {
            let off = hd * dh;
            for i in 0..t {
                let row = &bc.probs[(hd * t + i) * t..(hd * t + i) * t + i + 1];
                let d_o = &dattn[i * h + off..i * h + off + dh];
                let mut s = S::zero();
                for j in 0..=i {
                    let v = &bc.qkv[j * 3 * h + 2 * h + off..j * 3 * h + 2 * h + off + dh];
                    dp[j] = dot(d_o, v);
                    s += dp[j] * row[j];
                    axpy(&mut dqkv[j * 3 * h + 2 * h + off..j * 3 * h + 2 * h + off + dh], row[j], d_o);
                }
                for j in 0..=i {
                    let ds = row[j] * (dp[j] - s) * scale;
                    if ds == S::zero() {
                        continue;
                    }
                    let (qi, kj) = (i * 3 * h + off, j * 3 * h + h + off);
                    for e in 0..dh {
                        let (q, k) = (bc.qkv[qi + e], bc.qkv[kj + e]);
                        dqkv[qi + e] += ds * k;
                        dqkv[kj + e] += ds * q;
                    }
                }
            }
        }
        let mut dln1 = vec![S::zero(); t * h];
        {
            let (a, bb) = split_two(grads, b.wqkv, b.bqkv);
            linear_backward(&dqkv, &bc.ln1, self.p(b.wqkv), a, bb, Some(&mut dln1), t, h, 3 * h);
        }
        let mut dx = dx_mid;
        {
            let (a, bb) = split_two(grads, b.ln1_g, b.ln1_b);
            layer_norm_backward(&dln1, &bc.x_in, &bc.ln1_stats, self.p(b.ln1_g), &mut dx, a, bb, h);
        }
        dx
    }

    /// Starts an incremental decoding state over the observation prefix.
    pub fn start(&self, frames: &[SparseFrame]) -> Result<DecodeState<S>, ModelError> {
        self.check_inputs(frames, &[0])?;
        let mut st = DecodeState {
            keys: vec![Vec::new(); self.config.blocks],
            values: vec![Vec::new(); self.config.blocks],
            pos: 0,
            last: Vec::new(),
        };
        for p in 0..self.config.prefix_len() {
            let x = self.prefix_embedding(frames, p);
            self.push(&mut st, x);
        }
        Ok(st)
    }

    /// Feeds one token; returns the logits predicting the next one.
    pub fn feed(&self, st: &mut DecodeState<S>, token: u32) -> Result<Vec<S>, ModelError> {
        if token as usize >= self.config.vocab {
            return Err(ModelError::BadToken(token));
        }
        if st.pos >= self.config.context {
            return Err(ModelError::TooLong {
                len: st.pos + 1,
                context: self.config.context,
            });
        }
        let x = self.token_embedding(token, st.pos);
        self.push(st, x);
        let h = self.config.hidden;
        Ok(linear(&st.last, self.p(self.ix.lm_w), self.p(self.ix.lm_b), 1, h, self.config.vocab))
    }

    /// Runs one position through the trunk with cached keys/values; leaves
    /// the final normalized hidden state in `st.last`.
    fn push(&self, st: &mut DecodeState<S>, mut x: Vec<S>) {
        let c = &self.config;
        let (h, nh) = (c.hidden, c.heads);
        let f = h * c.ffn_mult;
        let dh = h / nh;
        let scale = S::one() / S::c(dh as f64).sqrt();
        for (bi, b) in self.ix.blocks.iter().enumerate() {
            let (ln1, _) = layer_norm(&x, self.p(b.ln1_g), self.p(b.ln1_b), 1, h);
            let qkv = linear(&ln1, self.p(b.wqkv), self.p(b.bqkv), 1, h, 3 * h);
            st.keys[bi].extend_from_slice(&qkv[h..2 * h]);
            st.values[bi].extend_from_slice(&qkv[2 * h..]);
            let n = st.pos + 1;
            let mut attn = vec![S::zero(); h];
            let mut scores = vec![S::zero(); n];
            for hd in 0..nh {
                let off = hd * dh;
                let q = &qkv[off..off + dh];
                for (j, s) in scores.iter_mut().enumerate() {
                    *s = dot(q, &st.keys[bi][j * h + off..j * h + off + dh]) * scale;
                }
                softmax_in_place(&mut scores);
                for (j, &p) in scores.iter().enumerate() {
                    axpy(&mut attn[off..off + dh], p, &st.values[bi][j * h + off..j * h + off + dh]);
                }
            }
            let proj = linear(&attn, self.p(b.wo), self.p(b.bo), 1, h, h);
            axpy(&mut x, S::one(), &proj);
            let (ln2, _) = layer_norm(&x, self.p(b.ln2_g), self.p(b.ln2_b), 1, h);
            let hid: Vec<S> = linear(&ln2, self.p(b.w1), self.p(b.b1), 1, h, f).into_iter().map(gelu).collect();
            let mlp = linear(&hid, self.p(b.w2), self.p(b.b2), 1, f, h);
            axpy(&mut x, S::one(), &mlp);
        }
        st.last = layer_norm(&x, self.p(self.ix.lnf_g), self.p(self.ix.lnf_b), 1, h).0;
        st.pos += 1;
    }

    /// Final hidden states of the text positions, for head-interface tests.
    pub fn text_hidden(&self, cache: &ForwardCache<S>) -> Vec<S> {
        let pre = self.config.prefix_len() * self.config.hidden;
        cache.y[pre..].to_vec()
    }
}

/// Key/value cache for incremental decoding.
#[derive(Debug, Clone)]
pub struct DecodeState<S> {
    keys: Vec<Vec<S>>,
    values: Vec<Vec<S>>,
    pos: usize,
    last: Vec<S>,
}

impl<S> DecodeState<S> {
    pub fn position(&self) -> usize {
        self.pos
    }
}

fn split_two<S>(g: &mut [Vec<S>], a: usize, b: usize) -> (&mut [S], &mut [S]) {
    assert!(a < b, "weight precedes its bias in the layout");
    let (lo, hi) = g.split_at_mut(b);
    (&mut lo[a], &mut hi[0])
}
