//! Evaluation: VQA accuracy, cross-modal retrieval and attention localization.

use serde::{Deserialize, Serialize};

use crate::attention::RegionSet;
use crate::error::{DanError, Result};
use crate::mdan::MDan;
use crate::rdan::{RDan, VqaExample};
use crate::synth::{MatchingItem, VqaItem};
use crate::tape::Tape;
use crate::text::TokenSequence;

use super::checkpoint::Checkpoint;
use super::metrics::{rank_of, retrieval_metrics, RetrievalMetrics};

/// Mean VQA accuracy with dropout disabled. Per-item scores are multiples of
/// 1/3, so they are accumulated as integer thirds and the mean is exact.
pub fn evaluate_vqa(model: &RDan, examples: &[VqaExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(DanError::EmptyInput("evaluate_vqa"));
    }
    let mut thirds: u64 = 0;
    for ex in examples {
        let predicted = model.predict(&ex.regions, &ex.question)?.answer;
        let count = ex.effective_counts().get(&predicted).copied().unwrap_or(0);
        thirds += u64::from(count.min(3));
    }
    Ok(thirds as f64 / (3 * examples.len()) as f64)
}

pub fn evaluate_vqa_checkpoint(checkpoint: &Checkpoint, examples: &[VqaExample]) -> Result<f64> {
    evaluate_vqa(checkpoint.model.as_rdan()?, examples)
}

/// Mean cross-entropy with dropout disabled.
pub fn mean_vqa_loss(model: &RDan, examples: &[VqaExample]) -> Result<f64> {
    if examples.is_empty() {
        return Err(DanError::EmptyInput("mean_vqa_loss"));
    }
    let mut total = 0.0;
    for ex in examples {
        let mut tape = Tape::new();
        let vars = model.load_vars(&mut tape)?;
        let loss = model.example_loss(&mut tape, &vars, ex, None)?;
        total += tape.scalar(loss);
    }
    Ok(total / examples.len() as f64)
}

/// Mean final-step visual attention weight on the region each question is
/// about.
pub fn planted_attention_mass(model: &RDan, items: &[VqaItem]) -> Result<f64> {
    if items.is_empty() {
        return Err(DanError::EmptyInput("planted_attention_mass"));
    }
    let mut total = 0.0;
    for item in items {
        let pred = model.predict(&item.scene.regions, &item.question)?;
        let last = pred
            .trace
            .steps
            .last()
            .ok_or(DanError::EmptyInput("attention trace"))?;
        total += last.visual[item.planted_region];
    }
    Ok(total / items.len() as f64)
}

/// Maps images and sentences into a shared space independently.
pub trait JointEmbedder {
    fn embed_image(&self, regions: &RegionSet) -> Result<Vec<f64>>;
    fn embed_text(&self, text: &TokenSequence) -> Result<Vec<f64>>;
}

impl JointEmbedder for MDan {
    fn embed_image(&self, regions: &RegionSet) -> Result<Vec<f64>> {
        MDan::embed_image(self, regions).map(|e| e.z)
    }

    fn embed_text(&self, text: &TokenSequence) -> Result<Vec<f64>> {
        MDan::embed_text(self, text).map(|e| e.z)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Direction {
    ImageToText,
    TextToImage,
}

impl std::str::FromStr for Direction {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "image-to-text" | "i2t" => Ok(Direction::ImageToText),
            "text-to-image" | "t2i" => Ok(Direction::TextToImage),
            other => Err(DanError::Config(format!("unknown retrieval direction `{other}`"))),
        }
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Embeddings of every image and caption of `items`, one embedder call each.
pub fn embed_all<E: JointEmbedder + ?Sized>(
    embedder: &E,
    items: &[MatchingItem],
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    let images = items
        .iter()
        .map(|it| embedder.embed_image(&it.scene.regions))
        .collect::<Result<Vec<_>>>()?;
    let texts = items
        .iter()
        .map(|it| embedder.embed_text(&it.caption))
        .collect::<Result<Vec<_>>>()?;
    Ok((images, texts))
}

/// Ranks, for each query, its paired item in the other modality's gallery.
pub fn ranks_from_embeddings(
    images: &[Vec<f64>],
    texts: &[Vec<f64>],
    ids: &[u64],
    direction: Direction,
) -> Vec<usize> {
    let (queries, gallery) = match direction {
        Direction::ImageToText => (images, texts),
        Direction::TextToImage => (texts, images),
    };
    queries
        .iter()
        .enumerate()
        .map(|(q, query)| {
            let scores: Vec<f64> = gallery.iter().map(|g| dot(query, g)).collect();
            rank_of(&scores, ids, q)
        })
        .collect()
}

/// Recall@K and median rank where item `i`'s image and caption are each
/// other's only ground truth.
pub fn evaluate_retrieval<E: JointEmbedder + ?Sized>(
    embedder: &E,
    items: &[MatchingItem],
    direction: Direction,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    if items.is_empty() {
        return Err(DanError::EmptyInput("retrieval gallery"));
    }
    let (images, texts) = embed_all(embedder, items)?;
    let ids: Vec<u64> = items.iter().map(|it| it.id).collect();
    retrieval_metrics(ranks_from_embeddings(&images, &texts, &ids, direction), ks)
}

pub fn evaluate_retrieval_checkpoint(
    checkpoint: &Checkpoint,
    items: &[MatchingItem],
    direction: Direction,
    ks: &[usize],
) -> Result<RetrievalMetrics> {
    evaluate_retrieval(checkpoint.model.as_mdan()?, items, direction, ks)
}
