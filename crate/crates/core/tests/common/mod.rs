#![allow(dead_code)]

pub mod oracle;

use dan_core::attention::RegionSet;
use dan_core::mdan::MDanConfig;
use dan_core::rdan::{RDanConfig, VqaExample};
use dan_core::synth::{
    gen_matching_dataset, gen_vqa_dataset, ConceptVocabulary, MatchingDataset, MatchingGenConfig, SplitSizes,
    VocabConfig, VqaDataset, VqaGenConfig, VqaItem, MAX_QUESTION_LEN,
};
use dan_core::text::TokenSequence;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_regions(rng: &mut impl Rng, n: usize, dim: usize, scale: f64) -> RegionSet {
    let rows: Vec<Vec<f64>> = (0..n)
        .map(|_| (0..dim).map(|_| rng.random_range(-scale..scale)).collect())
        .collect();
    RegionSet::from_rows(&rows).unwrap()
}

/// A sequence of `valid` random non-pad ids, right-padded to `len`.
pub fn random_tokens(rng: &mut impl Rng, valid: usize, len: usize, vocab: usize) -> TokenSequence {
    let ids: Vec<usize> = (0..valid).map(|_| rng.random_range(1..vocab)).collect();
    TokenSequence::unpadded(ids).padded_to(len)
}

pub fn small_rdan_config(hidden: usize, steps: usize, region_dim: usize, vocab: usize) -> RDanConfig {
    RDanConfig {
        steps,
        hidden,
        region_dim,
        num_answers: 5,
        vocab_size: vocab,
        max_len: 8,
    }
}

pub fn small_mdan_config(hidden: usize, steps: usize, region_dim: usize, vocab: usize, margin: f64) -> MDanConfig {
    MDanConfig {
        steps,
        hidden,
        region_dim,
        vocab_size: vocab,
        max_len: 8,
        margin,
    }
}

pub fn random_vqa(rng: &mut impl Rng, cfg: &RDanConfig, n: usize, valid: usize, len: usize) -> VqaExample {
    VqaExample {
        regions: random_regions(rng, n, cfg.region_dim, 1.0),
        question: random_tokens(rng, valid, len, cfg.vocab_size),
        answer: rng.random_range(0..cfg.num_answers),
        label_counts: None,
    }
}

pub fn small_vocab(concepts: usize, attributes: usize, region_dim: usize, seed: u64) -> ConceptVocabulary {
    let config = VocabConfig {
        num_concepts: concepts,
        num_attributes: attributes,
        region_dim,
        ..VocabConfig::default()
    };
    ConceptVocabulary::generate(&config, seed).unwrap()
}

/// A small noisy VQA dataset with four regions per scene.
pub fn small_vqa_data(train: usize, val: usize, seed: u64) -> VqaDataset {
    let vocab = small_vocab(8, 4, 12, seed);
    let config = VqaGenConfig {
        regions: 4,
        noise_sigma: 0.05 * vocab.min_separation(),
        sizes: SplitSizes { train, val, test: 20 },
    };
    gen_vqa_dataset(&vocab, &config, seed).unwrap()
}

pub fn small_match_data(train: usize, val: usize, seed: u64) -> MatchingDataset {
    let vocab = small_vocab(12, 4, 12, seed);
    let config = MatchingGenConfig {
        regions: 4,
        min_objects: 2,
        max_objects: 3,
        noise_sigma: 0.05 * vocab.min_separation(),
        sizes: SplitSizes { train, val, test: 20 },
    };
    gen_matching_dataset(&vocab, &config, seed).unwrap()
}

pub fn rdan_config_for(data: &VqaDataset, hidden: usize, steps: usize) -> RDanConfig {
    RDanConfig {
        steps,
        hidden,
        region_dim: data.vocab.region_dim,
        num_answers: data.vocab.num_answers(),
        vocab_size: data.vocab.vocab_size(),
        max_len: MAX_QUESTION_LEN,
    }
}

pub fn mdan_config_for(data: &MatchingDataset, hidden: usize, steps: usize) -> MDanConfig {
    let max_len = data.splits.train.iter().map(|i| i.caption.len()).max().unwrap();
    MDanConfig {
        steps,
        hidden,
        region_dim: data.vocab.region_dim,
        vocab_size: data.vocab.vocab_size(),
        max_len: max_len.max(MatchingGenConfig::caption_len(3)),
        margin: MDanConfig::scaled_margin(hidden),
    }
}

pub fn vqa_examples(items: &[VqaItem]) -> Vec<VqaExample> {
    items.iter().map(VqaItem::example).collect()
}
