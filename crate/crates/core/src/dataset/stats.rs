//! Corpus statistics: label and length histograms and rationale word counts.
//!
//! TSV layout: three blocks separated by blank lines, each starting with a
//! `# name` line and a column header:
//!
//! ```text
//! # actions          label  count  raw_count
//! # lengths          bin_start_m  bin_end_m  trajectories
//! # tokens           token  count
//! ```

use std::collections::{BTreeMap, BTreeSet, HashMap};

use serde::{Deserialize, Serialize};

use super::Corpus;
use crate::geometry::DiscreteAction;
use crate::lexicon::Lexicon;
use crate::tokenizer::split_words;

pub const LENGTH_BIN_M: f64 = 10.0;
pub const TOP_TOKENS: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub samples: usize,
    pub trajectories: usize,
    pub relabeled: usize,
    /// Training labels, indexed like [`DiscreteAction::ALL`].
    pub action_counts: Vec<(String, usize)>,
    pub raw_action_counts: Vec<(String, usize)>,
    /// `(bin start in meters, trajectories)`.
    pub length_histogram: Vec<(f64, usize)>,
    pub mean_length_m: f64,
    pub mean_critical_ops: f64,
    /// Most frequent rationale words outside the rationale templates.
    pub top_tokens: Vec<(String, usize)>,
}

/// Words contributed by the rationale templates themselves.
fn template_words() -> BTreeSet<String> {
    let mut out = BTreeSet::new();
    for t in &Lexicon::builtin().rationale {
        let mut stripped = t.clone();
        for p in ["{stage}", "{stages}", "{lm}", "{man}"] {
            stripped = stripped.replace(p, " ");
        }
        out.extend(split_words(&stripped).into_iter().map(str::to_string));
    }
    out
}

pub fn corpus_stats(corpus: &Corpus) -> CorpusStats {
    let mut counts = [0usize; 6];
    let mut raw = [0usize; 6];
    let mut words: HashMap<&str, usize> = HashMap::new();
    let skip = template_words();
    for s in &corpus.samples {
        counts[s.action_label.index()] += 1;
        raw[s.raw_label.index()] += 1;
        for w in split_words(&s.cot) {
            if !skip.contains(w) && !w.chars().all(|c| c.is_ascii_digit() || c.is_ascii_punctuation()) {
                *words.entry(w).or_default() += 1;
            }
        }
    }
    let named = |c: &[usize; 6]| {
        DiscreteAction::ALL
            .iter()
            .map(|a| (a.name().to_string(), c[a.index()]))
            .collect::<Vec<_>>()
    };
    let mut hist: BTreeMap<i64, usize> = BTreeMap::new();
    let (mut len_sum, mut ops_sum) = (0.0, 0.0);
    for t in &corpus.trajectories {
        let l = t.expert.path_length();
        len_sum += l;
        ops_sum += t.expert.critical_ops() as f64;
        *hist.entry((l / LENGTH_BIN_M).floor() as i64).or_default() += 1;
    }
    let mut top: Vec<(String, usize)> = words.into_iter().map(|(w, c)| (w.to_string(), c)).collect();
    top.sort_by(|a, b| b.1.cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    top.truncate(TOP_TOKENS);
    let nt = corpus.trajectories.len().max(1) as f64;
    CorpusStats {
        samples: corpus.samples.len(),
        trajectories: corpus.trajectories.len(),
        relabeled: corpus.relabeled,
        action_counts: named(&counts),
        raw_action_counts: named(&raw),
        length_histogram: hist.into_iter().map(|(b, c)| (b as f64 * LENGTH_BIN_M, c)).collect(),
        mean_length_m: len_sum / nt,
        mean_critical_ops: ops_sum / nt,
        top_tokens: top,
    }
}

impl CorpusStats {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("stats serialize")
    }

    pub fn to_tsv(&self) -> String {
        let mut s = String::from("# actions\nlabel\tcount\traw_count\n");
        for ((name, c), (_, r)) in self.action_counts.iter().zip(&self.raw_action_counts) {
            s.push_str(&format!("{name}\t{c}\t{r}\n"));
        }
        s.push_str("\n# lengths\nbin_start_m\tbin_end_m\ttrajectories\n");
        for (lo, c) in &self.length_histogram {
            s.push_str(&format!("{lo}\t{}\t{c}\n", lo + LENGTH_BIN_M));
        }
        s.push_str("\n# tokens\ntoken\tcount\n");
        for (w, c) in &self.top_tokens {
            s.push_str(&format!("{w}\t{c}\n"));
        }
        s
    }
}
