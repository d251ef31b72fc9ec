mod common;

use uavnav_core::rewards::{LexicalVerifier, RewardConfig};
use uavnav_policy::grpo::{sample_group, train_rft, RftConfig, RftState};
use uavnav_policy::sft::Control;
use uavnav_policy::Group;

fn cfg() -> RftConfig {
    RftConfig {
        lr: 1e-3,
        micro_batch: 2,
        grad_accum: 2,
        max_new_tokens: 20,
        epochs: 2,
        max_steps: Some(3),
        seed: 4,
        ..RftConfig::default()
    }
}

#[test]
fn training_leaves_the_waypoint_head_bit_identical() {
    let corpus = common::small_corpus(3, 31);
    let (vocab, ex) = common::examples(&corpus);
    let model = common::micro_model(&corpus, 8);
    let wp = model.group_checksum(Group::Wp);
    let wp_params: Vec<_> = model.params.iter().filter(|t| t.group == Group::Wp).cloned().collect();
    let c = cfg();
    let mut st = RftState::new(model.clone(), &c);
    let out = train_rft(&mut st, &ex[..8], &c, &vocab, &LexicalVerifier, &RewardConfig::default(), &mut |_, _| {
        Control::Continue
    })
    .unwrap();
    assert_eq!(out.logs.len(), 3);
    assert_eq!(out.wp_checksum, wp);
    assert_eq!(st.model.group_checksum(Group::Wp), wp);
    let after: Vec<_> = st.model.params.iter().filter(|t| t.group == Group::Wp).cloned().collect();
    assert_eq!(after, wp_params);
    assert_ne!(st.model.group_checksum(Group::Lm), model.group_checksum(Group::Lm));
    assert_eq!(st.reference, model);
}

#[test]
fn resumed_training_continues_the_same_run() {
    let corpus = common::small_corpus(3, 32);
    let (vocab, ex) = common::examples(&corpus);
    let model = common::micro_model(&corpus, 9);
    let c = cfg();
    let rewards = RewardConfig::default();
    let mut full = RftState::new(model.clone(), &c);
    let a = train_rft(&mut full, &ex[..8], &c, &vocab, &LexicalVerifier, &rewards, &mut |_, _| Control::Continue).unwrap();

    let mut part = RftState::new(model, &c);
    let b = train_rft(&mut part, &ex[..8], &c, &vocab, &LexicalVerifier, &rewards, &mut |l, _| {
        if l.step == 0 {
            Control::Stop
        } else {
            Control::Continue
        }
    })
    .unwrap();
    assert!(b.interrupted);
    let rest = train_rft(&mut part, &ex[..8], &c, &vocab, &LexicalVerifier, &rewards, &mut |_, _| Control::Continue).unwrap();
    assert_eq!(part.model, full.model);
    assert_eq!(b.logs[0], a.logs[0]);
    assert_eq!(rest.logs[..], a.logs[1..]);
}

#[test]
fn groups_are_reproducible() {
    let corpus = common::small_corpus(3, 33);
    let (vocab, ex) = common::examples(&corpus);
    let model = common::micro_model(&corpus, 10);
    let c = cfg();
    let g1 = sample_group(&model, &model, &ex[2], &c, 17, &vocab, &LexicalVerifier, &RewardConfig::default()).unwrap();
    let g2 = sample_group(&model, &model, &ex[2], &c, 17, &vocab, &LexicalVerifier, &RewardConfig::default()).unwrap();
    assert_eq!(g1, g2);
    assert_eq!(g1.rollouts.len(), c.group_size);
    let sum: f64 = g1.rollouts.iter().map(|r| r.advantage).sum();
    assert!(sum.abs() < 1e-9);
    for r in &g1.rollouts {
        assert_eq!(r.behavior_logprobs.len(), r.tokens.len());
        for (b, rf) in r.behavior_logprobs.iter().zip(&r.reference_logprobs) {
            assert!((b - rf).abs() < 1e-10);
        }
    }
}

#[test]
fn cold_sampling_gives_a_degenerate_group() {
    let corpus = common::small_corpus(3, 34);
    let (vocab, ex) = common::examples(&corpus);
    let model = common::micro_model(&corpus, 11);
    let c = RftConfig {
        temperature: 1e-9,
        ..cfg()
    };
    let g = sample_group(&model, &model, &ex[0], &c, 3, &vocab, &LexicalVerifier, &RewardConfig::default()).unwrap();
    let first = &g.rollouts[0];
    for r in &g.rollouts {
        assert_eq!(r.tokens, first.tokens);
        assert_eq!(r.advantage, 0.0);
    }
}
