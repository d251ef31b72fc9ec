#![allow(dead_code)]

pub mod fd;

use uavnav_core::dataset::{build_corpus, Corpus, GeneratorConfig, Split};
use uavnav_core::tokenizer::Vocabulary;
use uavnav_policy::example::{examples_from, Example};
use uavnav_policy::{DualHeadModel, ModelConfig};

pub fn small_corpus(trajectories: usize, seed: u64) -> Corpus {
    build_corpus(&GeneratorConfig {
        seed,
        trajectories,
        trajectories_per_world: 3,
        test_trajectories: 0,
        ..GeneratorConfig::default()
    })
    .unwrap()
}

pub fn examples(corpus: &Corpus) -> (Vocabulary, Vec<Example>) {
    let vocab = corpus.vocabulary().unwrap();
    let ex = examples_from(&vocab, &corpus.samples_in(Split::Train)).unwrap();
    (vocab, ex)
}

pub fn micro_config(vocab: usize, features: usize) -> ModelConfig {
    ModelConfig {
        hidden: 16,
        heads: 2,
        blocks: 2,
        wp_hidden: 16,
        context: 128,
        ..ModelConfig::standard(vocab, features)
    }
}

pub fn micro_model(corpus: &Corpus, seed: u64) -> DualHeadModel<f64> {
    let vocab = corpus.vocabulary().unwrap();
    let features = corpus.samples[0].frames[0].feature_len();
    DualHeadModel::new(micro_config(vocab.len(), features), seed).unwrap()
}
