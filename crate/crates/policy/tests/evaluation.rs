mod common;

use uavnav_core::dataset::{Corpus, Split};
use uavnav_core::geometry::navigation_error;
use uavnav_policy::eval::{
    action_accuracy, fisher_one_sided, start_step, summarize, EpisodeReport, EvalConfig, EvalSet, EvalSummary, ExpertPolicy,
    ModelPolicy, RandomWalkPolicy, ZeroWaypointPolicy,
};
use uavnav_policy::Head;

fn set(trajectories: usize, seed: u64) -> (Corpus, EvalSet) {
    let corpus = common::small_corpus(trajectories, seed);
    let set = EvalSet::from_corpus(&corpus, Split::Train, None).unwrap();
    (corpus, set)
}

fn successes(reports: &[EpisodeReport]) -> u64 {
    reports.iter().filter(|r| r.success).count() as u64
}

#[test]
fn expert_injection_is_perfect() {
    let (_, set) = set(9, 51);
    let cfg = EvalConfig::default();
    for head in [Head::Lm, Head::Wp] {
        for r in set.run(&ExpertPolicy, head, &cfg) {
            assert!(r.success, "{head:?} trajectory {} ends {:.2} m out", r.trajectory, r.ne);
            assert_eq!(r.ade, Some(0.0));
            assert_eq!(r.parse_failures, 0);
            assert_eq!(r.collisions, 0);
        }
    }
    let lm = set.run(&ExpertPolicy, Head::Lm, &cfg);
    assert!(lm.iter().all(|r| r.action_matches.iter().all(|&m| m)));
}

#[test]
fn expert_waypoint_replay_retraces_the_expert() {
    let (_, set) = set(6, 52);
    let cfg = EvalConfig::default();
    for ((_, _, expert), r) in set.episodes.iter().zip(set.run(&ExpertPolicy, Head::Wp, &cfg)) {
        // each step moves onto the next expert pose
        let at = (start_step(expert) + r.steps).min(expert.len() - 1);
        let want = expert.poses[at].as_waypoint().components();
        for (a, b) in r.final_pose.iter().zip(want) {
            assert!((a - b).abs() < 1e-6, "trajectory {}: {:?} vs {want:?}", r.trajectory, r.final_pose);
        }
    }
}

#[test]
fn staying_put_scores_the_start_distance() {
    let (_, set) = set(6, 53);
    let cfg = EvalConfig::default();
    for head in [Head::Lm, Head::Wp] {
        for ((_, _, expert), r) in set.episodes.iter().zip(set.run(&ZeroWaypointPolicy, head, &cfg)) {
            let start = expert.poses[start_step(expert)].position;
            assert_eq!(r.ne, navigation_error(&start, &expert.goal));
            assert_eq!(r.steps, 1);
        }
    }
}

#[test]
fn accuracy_against_raw_labels_loses_the_relabeled_share() {
    let corpus = common::small_corpus(9, 54);
    let relabeled: Vec<_> = corpus.samples.iter().map(|s| s.action_label).collect();
    let raw: Vec<_> = corpus.samples.iter().map(|s| s.raw_label).collect();
    let changed = relabeled.iter().zip(&raw).filter(|(a, b)| a != b).count();
    assert!(changed > 0);
    assert_eq!(changed, corpus.relabeled);
    let n = raw.len() as f64;
    let acc = action_accuracy(&relabeled, &raw).unwrap();
    assert!((acc - 100.0 * (1.0 - changed as f64 / n)).abs() < 1e-9);
    assert_eq!(action_accuracy(&relabeled, &relabeled).unwrap(), 100.0);
}

#[test]
fn summary_file_round_trips() {
    let (_, set) = set(6, 55);
    let cfg = EvalConfig::default();
    let mut reports = set.run(&RandomWalkPolicy, Head::Lm, &cfg);
    reports.extend(set.run(&RandomWalkPolicy, Head::Wp, &cfg));
    let s = summarize(&reports).unwrap();
    assert_eq!(s.heads.len(), 2);
    assert_eq!(EvalSummary::from_json(&s.to_json()).unwrap(), s);
    let lines: Vec<String> = reports.iter().map(|r| serde_json::to_string(r).unwrap()).collect();
    let back: Vec<EpisodeReport> = lines.iter().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(back, reports);
    assert_eq!(summarize(&back).unwrap(), s);
    assert!(EvalSummary::from_json("{\"heads\": 3}").is_err());
}

#[test]
fn evaluation_is_reproducible_across_thread_pools() {
    let (_, set) = set(6, 56);
    let cfg = EvalConfig::default();
    let run = |threads: usize| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| set.run(&RandomWalkPolicy, Head::Lm, &cfg))
    };
    assert_eq!(run(1), run(4));
}

#[test]
fn untrained_model_is_no_better_than_a_random_walk() {
    let (corpus, set) = set(30, 57);
    let vocab = corpus.vocabulary().unwrap();
    let model = common::micro_model(&corpus, 12);
    let cfg = EvalConfig {
        max_new_tokens: 24,
        ..EvalConfig::default()
    };
    let policy = ModelPolicy {
        model: &model,
        vocab: &vocab,
        max_new_tokens: cfg.max_new_tokens,
        with_waypoints: false,
    };
    let m = successes(&set.run(&policy, Head::Lm, &cfg));
    let w = successes(&set.run(&RandomWalkPolicy, Head::Lm, &cfg));
    let n = set.len() as u64;
    let p = fisher_one_sided(m, n, w, n);
    assert!(p >= 0.05, "untrained {m}/{n} vs walk {w}/{n}, p = {p}");
}

#[test]
fn fisher_test_orders_evidence() {
    assert_eq!(fisher_one_sided(0, 100, 5, 100), 1.0);
    let strong = fisher_one_sided(50, 100, 10, 100);
    let weak = fisher_one_sided(14, 100, 10, 100);
    assert!(strong < 1e-9, "{strong}");
    assert!(weak > 0.05 && weak < 1.0, "{weak}");
    assert!(fisher_one_sided(10, 100, 14, 100) > weak);
}
