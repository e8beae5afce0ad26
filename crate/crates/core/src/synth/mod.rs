//! Seeded synthetic multimodal data with planted ground truth.
//!
//! Every region of a scene is a concept prototype plus an attribute offset
//! plus Gaussian noise, so the region a question is about (and the answer it
//! holds) is known exactly. VQA questions ask for the attribute of one
//! concept; matching captions name the planted objects of their scene.

mod codec;
mod container;
mod io;

use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::attention::RegionSet;
use crate::error::{DanError, Result};
use crate::rdan::VqaExample;
use crate::text::TokenSequence;

pub use codec::EmbeddingRecord;
pub use container::{
    decode_container, encode_container, read_records, write_records, MAGIC as CONTAINER_MAGIC,
};
pub use io::{
    read_embeddings, read_manifest, read_split, read_vocab_file, split_path, write_embeddings,
    write_split, write_vocab_file, DatasetManifest, ManifestDims, Record, MANIFEST_FILE,
    MANIFEST_VERSION, VOCAB_FILE,
};

pub const PAD_WORD: &str = "<pad>";

const CONCEPT_NAMES: [&str; 26] = [
    "ball", "cup", "dog", "cat", "tree", "car", "hat", "book", "lamp", "chair", "boat", "bird",
    "fish", "clock", "kite", "shoe", "bag", "bike", "phone", "plate", "vase", "bench", "horse",
    "train", "bottle", "umbrella",
];

const ATTRIBUTE_NAMES: [&str; 6] = ["red", "green", "blue", "yellow", "black", "white"];

const FUNCTION_WORDS: [&str; 7] = ["what", "color", "is", "the", "of", "a", "and"];

/// Question templates; `None` marks the concept slot.
const QUESTION_TEMPLATES: [&[Option<&str>]; 3] = [
    &[Some("what"), Some("color"), Some("is"), Some("the"), None],
    &[Some("the"), None, Some("is"), Some("what"), Some("color")],
    &[Some("what"), Some("is"), Some("the"), Some("color"), Some("of"), Some("the"), None],
];

/// Longest question any template produces.
pub const MAX_QUESTION_LEN: usize = 7;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Concept {
    pub name: String,
    pub token: usize,
    pub prototype: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Attribute {
    pub name: String,
    pub token: usize,
    pub offset: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VocabConfig {
    pub num_concepts: usize,
    pub num_attributes: usize,
    pub region_dim: usize,
    /// Euclidean norm of every concept prototype.
    pub prototype_norm: f64,
    /// Euclidean norm of every attribute offset.
    pub attribute_norm: f64,
}

impl Default for VocabConfig {
    fn default() -> Self {
        VocabConfig {
            num_concepts: 26,
            num_attributes: 6,
            region_dim: 32,
            prototype_norm: 2.0,
            attribute_norm: 2.0,
        }
    }
}

/// Words, concept prototypes and attribute offsets shared by a dataset.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ConceptVocabulary {
    /// Token strings by id; id 0 is padding.
    pub words: Vec<String>,
    pub concepts: Vec<Concept>,
    pub attributes: Vec<Attribute>,
    /// Prototype of unnamed filler regions in matching scenes.
    pub background: Vec<f64>,
    pub region_dim: usize,
}

/// Minimum pairwise distance required between unit-scaled prototypes.
pub const MIN_UNIT_SEPARATION: f64 = 0.5;

fn random_direction<R: Rng + ?Sized>(dim: usize, norm: f64, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let len = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if len > 1e-9 {
            return v.into_iter().map(|x| x * norm / len).collect();
        }
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn unit(a: &[f64]) -> Vec<f64> {
    let len = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    a.iter().map(|x| x / len).collect()
}

impl ConceptVocabulary {
    pub fn generate(config: &VocabConfig, seed: u64) -> Result<Self> {
        if config.num_concepts == 0 || config.num_attributes == 0 || config.region_dim == 0 {
            return Err(DanError::Generation(
                "vocabulary needs at least one concept, one attribute and one feature dimension"
                    .into(),
            ));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut words = vec![PAD_WORD.to_string()];
        words.extend(FUNCTION_WORDS.iter().map(|w| w.to_string()));

        let mut prototypes: Vec<Vec<f64>> = Vec::with_capacity(config.num_concepts);
        for _ in 0..config.num_concepts {
            let mut tries = 0;
            let proto = loop {
                let candidate = random_direction(config.region_dim, config.prototype_norm, &mut rng);
                let cu = unit(&candidate);
                if prototypes
                    .iter()
                    .all(|p| distance(&unit(p), &cu) > MIN_UNIT_SEPARATION)
                {
                    break candidate;
                }
                tries += 1;
                if tries > 1000 {
                    return Err(DanError::Generation(format!(
                        "cannot place {} separated prototypes in {} dimensions",
                        config.num_concepts, config.region_dim
                    )));
                }
            };
            prototypes.push(proto);
        }
        let concepts = prototypes
            .into_iter()
            .enumerate()
            .map(|(i, prototype)| {
                let name = CONCEPT_NAMES
                    .get(i)
                    .map_or_else(|| format!("concept{i}"), |s| s.to_string());
                words.push(name.clone());
                Concept {
                    name,
                    token: words.len() - 1,
                    prototype,
                }
            })
            .collect();
        let attributes = (0..config.num_attributes)
            .map(|i| {
                let name = ATTRIBUTE_NAMES
                    .get(i)
                    .map_or_else(|| format!("attribute{i}"), |s| s.to_string());
                words.push(name.clone());
                Attribute {
                    name,
                    token: words.len() - 1,
                    offset: random_direction(config.region_dim, config.attribute_norm, &mut rng),
                }
            })
            .collect();
        let background = random_direction(config.region_dim, config.prototype_norm, &mut rng);
        Ok(ConceptVocabulary {
            words,
            concepts,
            attributes,
            background,
            region_dim: config.region_dim,
        })
    }

    pub fn vocab_size(&self) -> usize {
        self.words.len()
    }

    pub fn num_answers(&self) -> usize {
        self.attributes.len()
    }

    pub fn word_id(&self, word: &str) -> Option<usize> {
        self.words.iter().position(|w| w == word)
    }

    fn function_word(&self, word: &str) -> usize {
        self.word_id(word).expect("function words are always present")
    }

    pub fn words_of(&self, ids: &[usize]) -> Vec<&str> {
        ids.iter()
            .map(|&i| self.words.get(i).map_or("<unk>", String::as_str))
            .collect()
    }

    /// Noise-free feature of a concept carrying an attribute.
    pub fn combined(&self, concept: usize, attribute: usize) -> Vec<f64> {
        self.concepts[concept]
            .prototype
            .iter()
            .zip(&self.attributes[attribute].offset)
            .map(|(p, o)| p + o)
            .collect()
    }

    /// Smallest distance between two distinct noise-free region features
    /// (concept prototype plus attribute offset). Noise levels are quoted
    /// relative to this.
    pub fn min_separation(&self) -> f64 {
        let mut centers = Vec::new();
        for c in 0..self.concepts.len() {
            for a in 0..self.attributes.len() {
                centers.push(self.combined(c, a));
            }
        }
        let mut best = f64::INFINITY;
        for i in 0..centers.len() {
            for j in i + 1..centers.len() {
                best = best.min(distance(&centers[i], &centers[j]));
            }
        }
        best
    }

    /// Smallest pairwise distance between unit-scaled concept prototypes.
    pub fn min_unit_prototype_distance(&self) -> f64 {
        let units: Vec<Vec<f64>> = self.concepts.iter().map(|c| unit(&c.prototype)).collect();
        let mut best = f64::INFINITY;
        for i in 0..units.len() {
            for j in i + 1..units.len() {
                best = best.min(distance(&units[i], &units[j]));
            }
        }
        best
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlantedObject {
    pub region: usize,
    pub concept: usize,
    pub attribute: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub regions: RegionSet,
    /// One entry per planted concept, at most one per region.
    pub planted: Vec<PlantedObject>,
    pub noise_sigma: f64,
}

impl SyntheticScene {
    pub fn concept_set(&self) -> BTreeSet<usize> {
        self.planted.iter().map(|p| p.concept).collect()
    }

    pub fn object_set(&self) -> BTreeSet<(usize, usize)> {
        self.planted.iter().map(|p| (p.concept, p.attribute)).collect()
    }

    /// Exact bit pattern of the features, for duplicate detection.
    pub fn content_key(&self) -> Vec<u64> {
        self.regions
            .features()
            .data()
            .iter()
            .map(|v| v.to_bits())
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct VqaItem {
    pub id: u64,
    pub scene: SyntheticScene,
    pub question: TokenSequence,
    /// Attribute index of the planted region the question is about.
    pub answer: usize,
    pub planted_region: usize,
    /// Position of the concept word within the question.
    pub keyword_position: usize,
    pub label_counts: Option<BTreeMap<usize, u32>>,
}

impl VqaItem {
    pub fn example(&self) -> VqaExample {
        VqaExample {
            regions: self.scene.regions.clone(),
            question: self.question.clone(),
            answer: self.answer,
            label_counts: self.label_counts.clone(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchingItem {
    pub id: u64,
    pub scene: SyntheticScene,
    pub caption: TokenSequence,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitSizes {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl SplitSizes {
    pub fn total(&self) -> usize {
        self.train + self.val + self.test
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Val, Split::Test];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }

    /// Stream 0 is left to the vocabulary generator.
    fn stream(self) -> u64 {
        self as u64 + 1
    }
}

impl std::str::FromStr for Split {
    type Err = DanError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(DanError::Config(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Splits<T> {
    pub train: Vec<T>,
    pub val: Vec<T>,
    pub test: Vec<T>,
}

impl<T> Default for Splits<T> {
    fn default() -> Self {
        Splits {
            train: Vec::new(),
            val: Vec::new(),
            test: Vec::new(),
        }
    }
}

impl<T> Splits<T> {
    pub fn get(&self, split: Split) -> &[T] {
        match split {
            Split::Train => &self.train,
            Split::Val => &self.val,
            Split::Test => &self.test,
        }
    }

    pub(crate) fn get_mut(&mut self, split: Split) -> &mut Vec<T> {
        match split {
            Split::Train => &mut self.train,
            Split::Val => &mut self.val,
            Split::Test => &mut self.test,
        }
    }
}

/// A generated dataset: vocabulary, generator settings and the three splits.
#[derive(Clone, Debug, PartialEq)]
pub struct Dataset<T> {
    pub vocab: ConceptVocabulary,
    pub seed: u64,
    pub regions: usize,
    pub noise_sigma: f64,
    pub splits: Splits<T>,
}

pub type VqaDataset = Dataset<VqaItem>;
pub type MatchingDataset = Dataset<MatchingItem>;

impl<T> Dataset<T> {
    pub fn counts(&self) -> SplitSizes {
        SplitSizes {
            train: self.splits.train.len(),
            val: self.splits.val.len(),
            test: self.splits.test.len(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VqaGenConfig {
    pub regions: usize,
    pub noise_sigma: f64,
    pub sizes: SplitSizes,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MatchingGenConfig {
    pub regions: usize,
    /// Inclusive bounds on the number of objects planted and named per scene.
    pub min_objects: usize,
    pub max_objects: usize,
    pub noise_sigma: f64,
    pub sizes: SplitSizes,
}

impl MatchingGenConfig {
    /// Caption length in tokens for `objects` named objects.
    pub fn caption_len(objects: usize) -> usize {
        // "a <attribute> <concept>" joined by "and"
        (4 * objects).saturating_sub(1)
    }
}

fn split_rng(seed: u64, split: Split) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(split.stream());
    rng
}

const MAX_RESAMPLES: usize = 10_000;

fn noisy_row<R: Rng + ?Sized>(center: &[f64], noise: Option<&Normal<f64>>, rng: &mut R) -> Vec<f64> {
    center
        .iter()
        .map(|c| c + noise.map_or(0.0, |n| n.sample(rng)))
        .collect()
}

fn noise_dist(sigma: f64) -> Result<Option<Normal<f64>>> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(DanError::Generation(format!("invalid noise sigma {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(None);
    }
    Normal::new(0.0, sigma)
        .map(Some)
        .map_err(|e| DanError::Generation(e.to_string()))
}

/// Scenes with one distinct concept per region, each with a random attribute,
/// paired with a question about one of them.
pub fn gen_vqa_dataset(vocab: &ConceptVocabulary, config: &VqaGenConfig, seed: u64) -> Result<VqaDataset> {
    let n = config.regions;
    if n == 0 {
        return Err(DanError::Generation("scenes need at least one region".into()));
    }
    if n > vocab.concepts.len() {
        return Err(DanError::Generation(format!(
            "{n} regions need {n} distinct concepts but the vocabulary has {}",
            vocab.concepts.len()
        )));
    }
    if config.sizes.total() == 0 {
        return Err(DanError::Generation("requested an empty dataset".into()));
    }
    let noise = noise_dist(config.noise_sigma)?;
    let concept_ids: Vec<usize> = (0..vocab.concepts.len()).collect();
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut splits = Splits::default();
    let mut next_id = 0u64;

    for split in Split::ALL {
        let mut rng = split_rng(seed, split);
        let mut split_keys = Vec::new();
        for _ in 0..split_size(&config.sizes, split) {
            let mut attempts = 0;
            let (scene, key) = loop {
                let chosen: Vec<usize> = concept_ids.choose_multiple(&mut rng, n).cloned().collect();
                let planted: Vec<PlantedObject> = chosen
                    .iter()
                    .enumerate()
                    .map(|(region, &concept)| PlantedObject {
                        region,
                        concept,
                        attribute: rng.random_range(0..vocab.attributes.len()),
                    })
                    .collect();
                let rows: Vec<Vec<f64>> = planted
                    .iter()
                    .map(|p| noisy_row(&vocab.combined(p.concept, p.attribute), noise.as_ref(), &mut rng))
                    .collect();
                let scene = SyntheticScene {
                    regions: RegionSet::from_rows(&rows)?,
                    planted,
                    noise_sigma: config.noise_sigma,
                };
                let key = scene.content_key();
                if !seen.contains(&key) {
                    break (scene, key);
                }
                attempts += 1;
                if attempts >= MAX_RESAMPLES {
                    return Err(DanError::Generation(
                        "cannot draw a scene that is not already used by another split".into(),
                    ));
                }
            };
            split_keys.push(key);

            let target = scene.planted[rng.random_range(0..n)];
            let template = QUESTION_TEMPLATES[rng.random_range(0..QUESTION_TEMPLATES.len())];
            let mut ids = Vec::with_capacity(template.len());
            let mut keyword_position = 0;
            for (pos, slot) in template.iter().enumerate() {
                match slot {
                    Some(w) => ids.push(vocab.function_word(w)),
                    None => {
                        keyword_position = pos;
                        ids.push(vocab.concepts[target.concept].token);
                    }
                }
            }
            splits.get_mut(split).push(VqaItem {
                id: next_id,
                scene,
                question: TokenSequence::unpadded(ids),
                answer: target.attribute,
                planted_region: target.region,
                keyword_position,
                label_counts: None,
            });
            next_id += 1;
        }
        seen.extend(split_keys);
    }
    Ok(Dataset {
        vocab: vocab.clone(),
        seed,
        regions: n,
        noise_sigma: config.noise_sigma,
        splits,
    })
}

fn split_size(sizes: &SplitSizes, split: Split) -> usize {
    match split {
        Split::Train => sizes.train,
        Split::Val => sizes.val,
        Split::Test => sizes.test,
    }
}

/// Scenes with a few planted objects among background regions, each paired
/// with a caption naming every planted object with its attribute.
///
/// Within a split no scene's concept set contains another's, so under
/// concept-set overlap each caption is matched best by its own scene.
pub fn gen_matching_dataset(
    vocab: &ConceptVocabulary,
    config: &MatchingGenConfig,
    seed: u64,
) -> Result<MatchingDataset> {
    let n = config.regions;
    let (lo, hi) = (config.min_objects, config.max_objects);
    if lo == 0 || lo > hi {
        return Err(DanError::Generation(format!("invalid object bounds {lo}..={hi}")));
    }
    if hi > n || hi > vocab.concepts.len() {
        return Err(DanError::Generation(format!(
            "{hi} objects per scene exceed the {n} regions or {} concepts available",
            vocab.concepts.len()
        )));
    }
    if config.sizes.total() == 0 {
        return Err(DanError::Generation("requested an empty dataset".into()));
    }
    let noise = noise_dist(config.noise_sigma)?;
    let concept_ids: Vec<usize> = (0..vocab.concepts.len()).collect();
    let (a, and) = (vocab.function_word("a"), vocab.function_word("and"));
    let mut seen: HashSet<Vec<u64>> = HashSet::new();
    let mut splits = Splits::default();
    let mut next_id = 0u64;

    for split in Split::ALL {
        let mut rng = split_rng(seed, split);
        let mut concept_sets: Vec<BTreeSet<usize>> = Vec::new();
        let mut split_keys = Vec::new();
        for _ in 0..split_size(&config.sizes, split) {
            let mut attempts = 0;
            let (scene, key) = loop {
                attempts += 1;
                if attempts > MAX_RESAMPLES {
                    return Err(DanError::Generation(format!(
                        "insufficient distinct concept combinations for {} {} scenes",
                        split_size(&config.sizes, split),
                        split.name()
                    )));
                }
                let k = rng.random_range(lo..=hi);
                let chosen: Vec<usize> = concept_ids.choose_multiple(&mut rng, k).cloned().collect();
                let set: BTreeSet<usize> = chosen.iter().cloned().collect();
                if concept_sets
                    .iter()
                    .any(|other| other.is_subset(&set) || set.is_subset(other))
                {
                    continue;
                }
                let mut slots: Vec<usize> = (0..n).collect();
                slots.shuffle(&mut rng);
                let mut planted: Vec<PlantedObject> = chosen
                    .iter()
                    .zip(&slots)
                    .map(|(&concept, &region)| PlantedObject {
                        region,
                        concept,
                        attribute: rng.random_range(0..vocab.attributes.len()),
                    })
                    .collect();
                let mut rows = vec![Vec::new(); n];
                for p in &planted {
                    rows[p.region] = noisy_row(&vocab.combined(p.concept, p.attribute), noise.as_ref(), &mut rng);
                }
                for row in rows.iter_mut().filter(|r| r.is_empty()) {
                    *row = noisy_row(&vocab.background, noise.as_ref(), &mut rng);
                }
                planted.sort_by_key(|p| p.region);
                let scene = SyntheticScene {
                    regions: RegionSet::from_rows(&rows)?,
                    planted,
                    noise_sigma: config.noise_sigma,
                };
                let key = scene.content_key();
                if seen.contains(&key) {
                    continue;
                }
                concept_sets.push(set);
                break (scene, key);
            };
            split_keys.push(key);

            let mut order: Vec<PlantedObject> = scene.planted.clone();
            order.shuffle(&mut rng);
            let mut ids = Vec::with_capacity(MatchingGenConfig::caption_len(order.len()));
            for (i, p) in order.iter().enumerate() {
                if i > 0 {
                    ids.push(and);
                }
                ids.extend([a, vocab.attributes[p.attribute].token, vocab.concepts[p.concept].token]);
            }
            splits.get_mut(split).push(MatchingItem {
                id: next_id,
                scene,
                caption: TokenSequence::unpadded(ids),
            });
            next_id += 1;
        }
        seen.extend(split_keys);
    }
    Ok(Dataset {
        vocab: vocab.clone(),
        seed,
        regions: n,
        noise_sigma: config.noise_sigma,
        splits,
    })
}
