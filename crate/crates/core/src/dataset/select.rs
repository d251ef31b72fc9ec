//! Subset selection for reinforcement fine-tuning.

use std::collections::BTreeSet;

use super::{DatasetError, TrajectorySample};
use crate::geometry::DiscreteAction;
use crate::lexicon::Lexicon;

/// Scores how well a sample's frames match its instruction; higher is better.
pub trait SimilarityScorer: Sync {
    /// Deterministic score in `[0, 1]`.
    fn score(&self, sample: &TrajectorySample) -> f64;
}

impl<F: Fn(&TrajectorySample) -> f64 + Sync> SimilarityScorer for F {
    fn score(&self, sample: &TrajectorySample) -> f64 {
        self(sample)
    }
}

/// Fraction of the words of landmark labels visible in any frame that also
/// occur in the instruction; 0 when no landmark is visible.
#[derive(Debug, Clone, Copy, Default)]
pub struct LexicalScorer;

impl SimilarityScorer for LexicalScorer {
    fn score(&self, sample: &TrajectorySample) -> f64 {
        let labels = &Lexicon::builtin().landmarks;
        let visible: BTreeSet<&str> = sample
            .frames
            .iter()
            .flat_map(|f| f.visible_landmarks())
            .filter_map(|i| labels.get(i))
            .flat_map(|l| l.split_whitespace())
            .collect();
        if visible.is_empty() {
            return 0.0;
        }
        let words: BTreeSet<String> = sample
            .instruction
            .split(|c: char| !c.is_alphanumeric())
            .map(str::to_lowercase)
            .collect();
        visible.iter().filter(|w| words.contains(**w)).count() as f64 / visible.len() as f64
    }
}

/// Straight-labeled share of a subset of `size`, rounded half up.
pub fn straight_quota(size: usize, straight_fraction: f64) -> usize {
    ((size as f64 * straight_fraction + 0.5 + 1e-9).floor() as usize).min(size)
}

/// Picks `size` samples with [`straight_quota`] Straight labels and the rest
/// critical, each class taking its top scores (ties by ascending id).
/// Output lists the Straight picks first, each class in rank order.
pub fn select_rft_subset(
    samples: &[&TrajectorySample],
    scorer: &dyn SimilarityScorer,
    size: usize,
    straight_fraction: f64,
) -> Result<Vec<TrajectorySample>, DatasetError> {
    let n_straight = straight_quota(size, straight_fraction);
    let quotas = [("straight", true, n_straight), ("critical", false, size - n_straight)];
    let mut out = Vec::with_capacity(size);
    for (class, straight, quota) in quotas {
        let mut pool: Vec<(f64, &TrajectorySample)> = samples
            .iter()
            .filter(|s| (s.action_label == DiscreteAction::Straight) == straight)
            .map(|s| {
                let v = scorer.score(s);
                (if v.is_nan() { f64::NEG_INFINITY } else { v }, *s)
            })
            .collect();
        if pool.len() < quota {
            return Err(DatasetError::InsufficientClass {
                class,
                needed: quota,
                available: pool.len(),
            });
        }
        pool.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.id.cmp(&b.1.id)));
        out.extend(pool.into_iter().take(quota).map(|(_, s)| s.clone()));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_corpus, GeneratorConfig};

    fn corpus() -> crate::dataset::Corpus {
        build_corpus(&GeneratorConfig {
            trajectories: 6,
            trajectories_per_world: 3,
            test_trajectories: 0,
            ..GeneratorConfig::default()
        })
        .unwrap()
    }

    #[test]
    fn quota_rounding() {
        assert_eq!(straight_quota(10, 0.4), 4);
        assert_eq!(straight_quota(5, 0.5), 3);
        assert_eq!(straight_quota(5, 0.3), 2);
        assert_eq!(straight_quota(7, 0.4), 3);
        assert_eq!(straight_quota(3, 1.0), 3);
    }

    #[test]
    fn ratio_and_constant_scorer() {
        let c = corpus();
        let all: Vec<_> = c.samples.iter().collect();
        let sel = select_rft_subset(&all, &|_: &TrajectorySample| 0.5, 10, 0.4).unwrap();
        let straight: Vec<_> = sel.iter().filter(|s| s.action_label == DiscreteAction::Straight).collect();
        assert_eq!(straight.len(), 4);
        assert_eq!(sel.len(), 10);
        let smallest: Vec<u64> = all
            .iter()
            .filter(|s| s.action_label == DiscreteAction::Straight)
            .map(|s| s.id)
            .take(4)
            .collect();
        assert_eq!(straight.iter().map(|s| s.id).collect::<Vec<_>>(), smallest);
    }

    #[test]
    fn deficit_reported() {
        let c = corpus();
        let all: Vec<_> = c.samples.iter().collect();
        let crit = all.iter().filter(|s| s.action_label != DiscreteAction::Straight).count();
        match select_rft_subset(&all, &LexicalScorer, 2 * crit + 10, 0.0) {
            Err(DatasetError::InsufficientClass { class, needed, available }) => {
                assert_eq!(class, "critical");
                assert_eq!(available, crit);
                assert_eq!(needed, 2 * crit + 10);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn lexical_scores_in_unit_interval() {
        let c = corpus();
        for s in &c.samples {
            let v = LexicalScorer.score(s);
            assert!((0.0..=1.0).contains(&v));
        }
        assert!(c.samples.iter().any(|s| LexicalScorer.score(s) > 0.0));
    }
}
