//! Analytic gradients against central finite differences in double precision.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uavnav_core::rewards::aggregate;
use uavnav_policy::grpo::{group_gradient, grpo_loss, sequence_logprobs, Rollout, RftConfig, RolloutGroup};
use uavnav_policy::loss::{lm_loss, wp_loss};
use uavnav_policy::model::Grads;
use uavnav_policy::sft::{accumulated_gradient, objective};
use uavnav_policy::{generate, DecodeConfig, DualHeadModel, Example, Group};

pub const PROBES: usize = 64;
pub const STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-3;
/// Probes where both derivatives are below this carry no signal.
pub const SIGNAL: f64 = 1e-7;

#[derive(Debug, Clone, Copy)]
pub struct FdReport {
    pub probes: usize,
    pub worst: f64,
}

/// Compares `PROBES` informative entries of `grads` with differences of `f`.
pub fn check(
    model: &DualHeadModel<f64>,
    grads: &Grads<f64>,
    f: &dyn Fn(&DualHeadModel<f64>) -> f64,
    seed: u64,
) -> Result<FdReport, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rep = FdReport { probes: 0, worst: 0.0 };
    let mut attempts = 0;
    while rep.probes < PROBES {
        attempts += 1;
        if attempts > 200 * PROBES {
            return Err(format!("only {} informative probes", rep.probes));
        }
        let ti = rng.gen_range(0..model.params.len());
        let i = rng.gen_range(0..model.params[ti].len());
        let mut plus = model.clone();
        plus.params[ti].data[i] += STEP;
        let mut minus = model.clone();
        minus.params[ti].data[i] -= STEP;
        let fd = (f(&plus) - f(&minus)) / (2.0 * STEP);
        let an = grads[ti][i];
        if an.abs().max(fd.abs()) < SIGNAL {
            continue;
        }
        let rel = (an - fd).abs() / an.abs().max(fd.abs());
        rep.worst = rep.worst.max(rel);
        if rel > REL_TOL {
            return Err(format!("{}[{i}] analytic {an:e} vs fd {fd:e}", model.params[ti].name));
        }
        rep.probes += 1;
    }
    Ok(rep)
}

fn untouched(model: &DualHeadModel<f64>, grads: &Grads<f64>, group: Group) -> Result<(), String> {
    for (t, g) in model.params.iter().zip(grads) {
        if t.group == group && g.iter().any(|&v| v != 0.0) {
            return Err(format!("{} has a gradient", t.name));
        }
    }
    Ok(())
}

/// Two training examples with expert waypoints nudged away from the L1 kinks.
pub fn setup() -> (DualHeadModel<f64>, Vec<Example>) {
    let corpus = super::small_corpus(3, 11);
    let (_, mut ex) = super::examples(&corpus);
    ex.truncate(2);
    for (n, e) in ex.iter_mut().enumerate() {
        for k in 0..3 {
            for j in 0..4 {
                e.waypoints[k][j] += 0.31 + 0.07 * (k + j + n) as f64;
            }
        }
    }
    (super::micro_model(&corpus, 5), ex)
}

pub fn language_loss() -> Result<FdReport, String> {
    let (model, ex) = setup();
    let e = &ex[0];
    let f = |m: &DualHeadModel<f64>| {
        let (out, _) = m.forward(&e.frames, &e.encoded.tokens, None).unwrap();
        lm_loss(&out.logits, m.config.vocab, &e.targets(), &e.mask()).unwrap().0
    };
    let (out, cache) = model.forward(&e.frames, &e.encoded.tokens, None).unwrap();
    let (_, dl) = lm_loss(&out.logits, model.config.vocab, &e.targets(), &e.mask()).unwrap();
    let mut g = model.zero_grads();
    model.backward(&cache, Some(&dl), None, &mut g);
    untouched(&model, &g, Group::Wp)?;
    check(&model, &g, &f, 1)
}

pub fn waypoint_loss() -> Result<FdReport, String> {
    let (model, ex) = setup();
    let e = &ex[1];
    let f = |m: &DualHeadModel<f64>| {
        let (out, _) = m.forward(&e.frames, &e.encoded.tokens, Some(e.encoded.slots)).unwrap();
        wp_loss(&out.waypoints.unwrap(), &e.waypoints).0
    };
    let (out, cache) = model.forward(&e.frames, &e.encoded.tokens, Some(e.encoded.slots)).unwrap();
    let (_, dwp) = wp_loss(&out.waypoints.unwrap(), &e.waypoints);
    let mut g = model.zero_grads();
    model.backward(&cache, None, Some(&dwp), &mut g);
    let lm_head = model.params.iter().position(|t| t.name == "lm_head.w").unwrap();
    if g[lm_head].iter().any(|&v| v != 0.0) {
        return Err("lm_head.w has a waypoint gradient".into());
    }
    check(&model, &g, &f, 2)
}

/// Full supervised objective over two micro-batches, plus its log-λ slope.
pub fn supervised_objective() -> Result<FdReport, String> {
    let (model, ex) = setup();
    let refs: Vec<&Example> = ex.iter().collect();
    let log_lambda = 0.4;
    let bg = accumulated_gradient(&model, &[&refs[..1], &refs[1..]], log_lambda, None).map_err(|e| e.to_string())?;
    let f = |m: &DualHeadModel<f64>| objective(m, &refs, log_lambda, None).unwrap().total;
    let rep = check(&model, &bg.grads, &f, 3)?;

    let fl = |ll: f64| objective(&model, &refs, ll, None).unwrap().total;
    let fd = (fl(log_lambda + STEP) - fl(log_lambda - STEP)) / (2.0 * STEP);
    let rel = (fd - bg.d_log_lambda).abs() / fd.abs().max(bg.d_log_lambda.abs());
    if rel > REL_TOL {
        return Err(format!("d/dlog-lambda {} vs fd {fd}", bg.d_log_lambda));
    }
    // the weighted-sum part alone differentiates to λ·L_WP
    let l = bg.losses;
    if (bg.d_log_lambda + 1.0 - l.lambda * l.wp).abs() > 1e-12 {
        return Err("log-lambda slope is not lambda * L_WP - 1".into());
    }
    Ok(FdReport {
        probes: rep.probes + 1,
        worst: rep.worst.max(rel),
    })
}

/// Group objective on off-policy rollouts that exercise both surrogate
/// branches and the KL term.
pub fn policy_objective() -> Result<FdReport, String> {
    let (model, ex) = setup();
    let e = &ex[0];
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let zero = aggregate(0.0, 0.0, 0.0, 0.0, &Default::default()).unwrap();
    let mut rollouts = Vec::new();
    for (i, adv) in [1.3, -0.4, 0.8, -1.7].into_iter().enumerate() {
        let cfg = DecodeConfig {
            temperature: 1.0,
            top_p: 1.0,
            top_k: 0,
            max_len: 12,
            seed: i as u64,
        };
        let g = generate(&model, &e.frames, &e.prompt, &cfg).unwrap();
        let (cur, _, _) = sequence_logprobs(&model, &e.frames, &e.prompt, &g.tokens).unwrap();
        rollouts.push(Rollout {
            behavior_logprobs: cur.iter().map(|v| v + rng.gen_range(-0.35..0.35)).collect(),
            reference_logprobs: cur.iter().map(|v| v + rng.gen_range(-0.5..0.5)).collect(),
            tokens: g.tokens,
            text: String::new(),
            reward: zero,
            advantage: adv,
        });
    }
    let group = RolloutGroup { sample_id: 0, rollouts };
    let cfg = RftConfig {
        beta: 0.3,
        ..RftConfig::default()
    };
    let f = |m: &DualHeadModel<f64>| {
        let cur: Vec<Vec<f64>> = group
            .rollouts
            .iter()
            .map(|r| sequence_logprobs(m, &e.frames, &e.prompt, &r.tokens).unwrap().0)
            .collect();
        grpo_loss(&group, &cur, cfg.beta, cfg.clip_eps).unwrap().0.loss
    };
    let mut g = model.zero_grads();
    let loss = group_gradient(&model, e, &group, &cfg, 1.0, &mut g).map_err(|e| e.to_string())?;
    if loss.clip_fraction == 0.0 {
        return Err("no clipped tokens".into());
    }
    untouched(&model, &g, Group::Wp)?;
    check(&model, &g, &f, 4)
}
