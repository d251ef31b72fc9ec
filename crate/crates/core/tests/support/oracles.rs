//! Independent reference checks for metrics, rewards and dataset rules.
//! Each returns a short detail line on success. The acceptance harness in the
//! cli crate includes this file too.

use std::collections::BTreeMap;
use std::panic::{catch_unwind, AssertUnwindSafe};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uavnav_core::dataset::{
    apply_temporal_window, build_corpus, corpus_from_bytes, corpus_to_bytes, relabel, select_rft_subset, straight_quota, Corpus,
    GeneratorConfig, LexicalScorer, SimilarityScorer, TrajectorySample,
};
use uavnav_core::geometry::{ade, is_success, navigation_error, SUCCESS_RADIUS};
use uavnav_core::rewards::{reward_length, score_output, LexicalVerifier, RewardConfig, RewardTarget};
use uavnav_core::{DiscreteAction, Vec3, Waypoint};

pub type Check = Result<String, String>;

fn dist(a: [f64; 3], b: [f64; 3]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1]).hypot(a[2] - b[2])
}

fn close(a: f64, b: f64, tol: f64) -> bool {
    (a - b).abs() <= tol * b.abs().max(1.0)
}

fn point(rng: &mut ChaCha8Rng, scale: f64) -> [f64; 4] {
    [
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale..scale),
        rng.gen_range(-scale / 4.0..scale / 4.0),
        rng.gen_range(-3.0..3.0),
    ]
}

/// ADE and navigation error against a hypot-based recomputation on random
/// sequence pairs.
pub fn metric_oracles(pairs: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for case in 0..pairs {
        let len = rng.gen_range(1..=12);
        let scale = [1.0, 30.0, 500.0][case % 3];
        let raw: Vec<([f64; 4], [f64; 4])> = (0..len).map(|_| (point(&mut rng, scale), point(&mut rng, scale))).collect();
        let wp = |p: [f64; 4]| Waypoint::new(p[0], p[1], p[2], p[3]).map_err(|e| e.to_string());
        let pred = raw.iter().map(|(p, _)| wp(*p)).collect::<Result<Vec<_>, _>>()?;
        let exp = raw.iter().map(|(_, e)| wp(*e)).collect::<Result<Vec<_>, _>>()?;
        let got = ade(&pred, &exp).map_err(|e| e.to_string())?;
        let want = raw.iter().map(|(p, e)| dist([p[0], p[1], p[2]], [e[0], e[1], e[2]])).sum::<f64>() / len as f64;
        if !close(got, want, 1e-9) {
            return Err(format!("case {case}: ade {got} vs oracle {want}"));
        }
        let (p, e) = raw[0];
        let ne = navigation_error(&Vec3::new(p[0], p[1], p[2]), &Vec3::new(e[0], e[1], e[2]));
        let ne_want = dist([p[0], p[1], p[2]], [e[0], e[1], e[2]]);
        if !close(ne, ne_want, 1e-9) {
            return Err(format!("case {case}: navigation error {ne} vs oracle {ne_want}"));
        }
        if is_success(ne) != (ne_want <= SUCCESS_RADIUS) && (ne_want - SUCCESS_RADIUS).abs() > 1e-9 {
            return Err(format!("case {case}: success flag wrong at {ne_want}"));
        }
        worst = worst.max((got - want).abs() / want.abs().max(1.0)).max((ne - ne_want).abs() / ne_want.max(1.0));
    }
    Ok(format!("{pairs} pairs, worst relative deviation {worst:.1e}"))
}

/// Sweeps distances across 20 m ± 1e-6 (plus the neighbouring floats of 20)
/// along several directions; success must be exactly `d <= 20`.
pub fn success_boundary(points: usize) -> Check {
    let mut ds: Vec<f64> = (0..=points)
        .map(|k| SUCCESS_RADIUS - 1e-6 + 2e-6 * k as f64 / points as f64)
        .collect();
    let below = f64::from_bits(SUCCESS_RADIUS.to_bits() - 1);
    let above = f64::from_bits(SUCCESS_RADIUS.to_bits() + 1);
    ds.extend([below, SUCCESS_RADIUS, above]);
    let mut checked = 0;
    for &d in &ds {
        if is_success(d) != (d <= SUCCESS_RADIUS) {
            return Err(format!("is_success({d:e}) wrong"));
        }
        // axis-aligned offsets keep the distance exact
        for axis in 0..3 {
            let mut p = [0.0; 3];
            p[axis] = d;
            for sign in [1.0, -1.0] {
                let goal = Vec3::new(5.0, -7.0, 12.0);
                let fin = Vec3::new(goal.x + sign * p[0], goal.y + sign * p[1], goal.z + sign * p[2]);
                let ne = navigation_error(&fin, &goal);
                let exact = (goal.x + sign * p[0] - goal.x).abs() + (goal.y + sign * p[1] - goal.y).abs()
                    + (goal.z + sign * p[2] - goal.z).abs();
                if ne != exact || is_success(ne) != (exact <= SUCCESS_RADIUS) {
                    return Err(format!("offset {d:e} on axis {axis}: ne {ne:e}, exact {exact:e}"));
                }
                checked += 1;
            }
        }
    }
    if !is_success(SUCCESS_RADIUS) || is_success(above) || !is_success(below) {
        return Err("radius must be inclusive".into());
    }
    Ok(format!("{checked} boundary placements, radius inclusive"))
}

const VALID: &[&str] = &[
    "<think>This is stage 2 of 3, near the red tower. Next I will turn left.</think><action>turn_left</action>",
    "<think>stage 1 of 2 keep going</think><action>straight</action><wp1><wp2><wp3><eos>",
    "<think>ascend above the gold dome</think> <action>ascend</action><eos><pad><pad>",
    "<think>x</think><action>stop</action>",
];

fn mutate(rng: &mut ChaCha8Rng, base: &str) -> String {
    let mut b = base.as_bytes().to_vec();
    for _ in 0..rng.gen_range(1..=4) {
        let at = rng.gen_range(0..=b.len());
        match rng.gen_range(0..4) {
            0 if at < b.len() => {
                b.remove(at);
            }
            1 if at < b.len() => b[at] = rng.gen(),
            2 => b.insert(at, rng.gen()),
            _ => {
                let piece = ["<think>", "</think>", "<action>", "</action>", "<eos>", "stop", " "][rng.gen_range(0..7)];
                b.splice(at..at, piece.bytes());
            }
        }
    }
    String::from_utf8_lossy(&b).into_owned()
}

/// Scores random byte strings and mutated valid outputs; no panics, binary
/// format and action rewards, action never above format.
pub fn reward_fuzz(random: usize, mutated: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let cfg = RewardConfig::default();
    let mut panics = 0;
    let mut well_formed = 0;
    for i in 0..random + mutated {
        let text = if i < random {
            let len = rng.gen_range(0..160);
            let bytes: Vec<u8> = (0..len).map(|_| rng.gen()).collect();
            String::from_utf8_lossy(&bytes).into_owned()
        } else {
            let base = VALID[i % VALID.len()];
            mutate(&mut rng, base)
        };
        let action = DiscreteAction::ALL[i % DiscreteAction::ALL.len()];
        let target = RewardTarget {
            action,
            landmark: "red tower",
            stage: 2,
            expert_cot_len: 1 + i % 20,
        };
        match catch_unwind(AssertUnwindSafe(|| score_output(&text, &target, &LexicalVerifier, &cfg))) {
            Err(_) => panics += 1,
            Ok(r) => {
                if r.format != 0.0 && r.format != 1.0 {
                    return Err(format!("format reward {} for {text:?}", r.format));
                }
                if r.action != 0.0 && r.action != 1.0 {
                    return Err(format!("action reward {} for {text:?}", r.action));
                }
                if r.action > r.format {
                    return Err(format!("action above format for {text:?}"));
                }
                if !r.total.is_finite() {
                    return Err(format!("non-finite total for {text:?}"));
                }
                well_formed += r.format as usize;
            }
        }
    }
    if panics > 0 {
        return Err(format!("{panics} inputs aborted scoring"));
    }
    Ok(format!("{} inputs, 0 aborts, {well_formed} well-formed", random + mutated))
}

/// Length reward at ratios 1.2, 3.0 and 2.25 from integer token counts.
pub fn length_anchors() -> Check {
    let cases = [((12, 10), 1.0), ((6, 5), 1.0), ((30, 10), -1.0), ((9, 3), -1.0), ((9, 4), 0.0), ((45, 20), 0.0)];
    for ((g, e), want) in cases {
        let got = reward_length(g, e);
        if got != want {
            return Err(format!("ratio {g}/{e}: {got} != {want}"));
        }
    }
    Ok("ratio 1.2 -> 1, 3.0 -> -1, 2.25 -> 0 exactly".into())
}

/// Reference relabeling: a backward scan remembering the nearest critical step ahead.
pub fn relabel_reference(raw: &[DiscreteAction], window: usize) -> Vec<DiscreteAction> {
    let mut out = raw.to_vec();
    let mut next: Option<usize> = None;
    for i in (0..raw.len()).rev() {
        if raw[i] != DiscreteAction::Straight {
            next = Some(i);
        } else if let Some(j) = next {
            if j - i <= window {
                out[i] = raw[j];
            }
        }
    }
    out
}

fn random_labels(rng: &mut ChaCha8Rng) -> Vec<DiscreteAction> {
    let len = rng.gen_range(0..48);
    (0..len)
        .map(|_| {
            if rng.gen_bool(0.6) {
                DiscreteAction::Straight
            } else {
                DiscreteAction::ALL[rng.gen_range(1..DiscreteAction::ALL.len())]
            }
        })
        .collect()
}

pub fn relabel_oracle(sequences: usize, seed: u64) -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut changed = 0usize;
    for case in 0..sequences {
        let raw = random_labels(&mut rng);
        let window = rng.gen_range(0..6);
        let got = relabel(&raw, window);
        let want = relabel_reference(&raw, window);
        if got != want {
            return Err(format!("case {case} (window {window}): {raw:?} -> {got:?}, oracle {want:?}"));
        }
        changed += got.iter().zip(&raw).filter(|(a, b)| a != b).count();
    }
    Ok(format!("{sequences} sequences, {changed} relabeled steps, all match"))
}

fn by_trajectory(samples: &mut [TrajectorySample]) -> BTreeMap<u32, Vec<&mut TrajectorySample>> {
    let mut m: BTreeMap<u32, Vec<&mut TrajectorySample>> = BTreeMap::new();
    for s in samples.iter_mut() {
        m.entry(s.trajectory).or_default().push(s);
    }
    m
}

fn window_once(samples: &[TrajectorySample], window: usize) -> (Vec<TrajectorySample>, usize) {
    let mut out = samples.to_vec();
    let mut n = 0;
    for (_, group) in by_trajectory(&mut out) {
        let mut owned: Vec<TrajectorySample> = group.iter().map(|s| (**s).clone()).collect();
        n += apply_temporal_window(&mut owned, window);
        for (dst, src) in group.into_iter().zip(owned) {
            *dst = src;
        }
    }
    (out, n)
}

/// Temporal window on real trajectories: idempotent, independent of earlier
/// windows, and equal to the reference on the raw labels.
pub fn window_rules(corpus: &Corpus) -> Check {
    let (once, n1) = window_once(&corpus.samples, 2);
    let (twice, n2) = window_once(&once, 2);
    if once != twice || n1 != n2 {
        return Err("applying the window twice changed the samples".into());
    }
    let (other, _) = window_once(&corpus.samples, 4);
    let (back, _) = window_once(&other, 2);
    if back != once {
        return Err("result depends on a previous window".into());
    }
    let mut per: BTreeMap<u32, Vec<&TrajectorySample>> = BTreeMap::new();
    for s in &once {
        per.entry(s.trajectory).or_default().push(s);
    }
    for (t, ss) in per {
        let raw: Vec<_> = ss.iter().map(|s| s.raw_label).collect();
        let want = relabel_reference(&raw, 2);
        if ss.iter().map(|s| s.action_label).collect::<Vec<_>>() != want {
            return Err(format!("trajectory {t} disagrees with the reference"));
        }
    }
    if n1 != corpus.relabeled {
        return Err(format!("{n1} relabeled, corpus records {}", corpus.relabeled));
    }
    Ok(format!("{} samples, {n1} relabeled, idempotent", corpus.samples.len()))
}

/// Reference selection: one full sort of every sample by (class, score
/// descending, id) and a per-class cut.
fn subset_reference(samples: &[&TrajectorySample], scorer: &dyn SimilarityScorer, size: usize, frac: f64) -> Vec<u64> {
    let quota = straight_quota(size, frac);
    let mut all: Vec<(bool, f64, u64)> = samples
        .iter()
        .map(|s| (s.action_label != DiscreteAction::Straight, scorer.score(s), s.id))
        .collect();
    all.sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
    let straight = all.iter().filter(|x| !x.0).take(quota).map(|x| x.2);
    let critical = all.iter().filter(|x| x.0).take(size - quota).map(|x| x.2);
    straight.chain(critical).collect()
}

pub fn subset_rules(corpus: &Corpus) -> Check {
    let samples: Vec<&TrajectorySample> = corpus.samples.iter().collect();
    let coarse = |s: &TrajectorySample| (s.id % 7) as f64 / 7.0;
    let scorers: [(&str, &dyn SimilarityScorer); 2] = [("lexical", &LexicalScorer), ("tied", &coarse)];
    let mut checked = 0;
    for (name, scorer) in scorers {
        for size in [10, 50, 100, 120] {
            let got = select_rft_subset(&samples, scorer, size, 0.4).map_err(|e| e.to_string())?;
            let straight = got.iter().filter(|s| s.action_label == DiscreteAction::Straight).count();
            if straight * 10 != size * 4 || got.len() != size {
                return Err(format!("{name} size {size}: {straight} straight of {}", got.len()));
            }
            let ids: Vec<u64> = got.iter().map(|s| s.id).collect();
            if ids != subset_reference(&samples, scorer, size, 0.4) {
                return Err(format!("{name} size {size}: differs from the full-sort reference"));
            }
            checked += 1;
        }
    }
    Ok(format!("{checked} selections at exactly 4:6, equal to the full sort"))
}

pub fn corpus_round_trip(corpus: &Corpus) -> Check {
    let bytes = corpus_to_bytes(corpus);
    let back = corpus_from_bytes(&bytes).map_err(|e| e.to_string())?;
    if &back != corpus {
        return Err("decoded corpus differs".into());
    }
    if corpus_to_bytes(&back) != bytes {
        return Err("re-encoded bytes differ".into());
    }
    Ok(format!("{} bytes round-trip identically", bytes.len()))
}

pub fn small_corpus(seed: u64) -> Corpus {
    build_corpus(&GeneratorConfig {
        seed,
        trajectories: 12,
        trajectories_per_world: 4,
        test_trajectories: 3,
        ..GeneratorConfig::default()
    })
    .expect("corpus builds")
}
