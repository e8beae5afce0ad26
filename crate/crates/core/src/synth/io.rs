//! Dataset directories: a manifest, a vocabulary file and one container per
//! split.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{DanError, Result};

use super::codec::{self, Decoded, EmbeddingRecord};
use super::container::{read_records, write_records};
use super::{
    Attribute, Concept, ConceptVocabulary, Dataset, MatchingItem, Split, SplitSizes, Splits,
    VqaItem, PAD_WORD,
};

pub const MANIFEST_FILE: &str = "manifest.json";
pub const VOCAB_FILE: &str = "vocab.txt";
pub const MANIFEST_VERSION: u32 = 1;

/// Item types that can be stored in a split container.
pub trait Record: Sized {
    const TASK: &'static str;
    fn encode(&self) -> Vec<u8>;
    fn decode(bytes: &[u8]) -> Decoded<Self>;
    fn text_len(&self) -> usize;
}

impl Record for VqaItem {
    const TASK: &'static str = "vqa";
    fn encode(&self) -> Vec<u8> {
        codec::encode_vqa(self)
    }
    fn decode(bytes: &[u8]) -> Decoded<Self> {
        codec::decode_vqa(bytes)
    }
    fn text_len(&self) -> usize {
        self.question.len()
    }
}

impl Record for MatchingItem {
    const TASK: &'static str = "match";
    fn encode(&self) -> Vec<u8> {
        codec::encode_matching(self)
    }
    fn decode(bytes: &[u8]) -> Decoded<Self> {
        codec::decode_matching(bytes)
    }
    fn text_len(&self) -> usize {
        self.caption.len()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ManifestDims {
    pub region_dim: usize,
    pub regions: usize,
    pub vocab_size: usize,
    pub num_answers: usize,
    pub max_len: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: String,
    pub seed: u64,
    pub dims: ManifestDims,
    pub counts: SplitSizes,
    pub noise_sigma: f64,
    pub concepts: Vec<Concept>,
    pub attributes: Vec<Attribute>,
    pub background: Vec<f64>,
}

pub fn split_path(dir: &Path, split: Split) -> PathBuf {
    dir.join(format!("{}.dan", split.name()))
}

pub fn write_split<T: Record>(path: &Path, items: &[T]) -> Result<()> {
    let records: Vec<Vec<u8>> = items.iter().map(Record::encode).collect();
    write_records(path, &records)
}

pub fn read_split<T: Record>(path: &Path) -> Result<Vec<T>> {
    read_records(path)?
        .iter()
        .enumerate()
        .map(|(record, bytes)| {
            T::decode(bytes).map_err(|reason| DanError::MalformedRecord {
                path: path.to_path_buf(),
                record,
                reason,
            })
        })
        .collect()
}

pub fn write_vocab_file(path: &Path, words: &[String]) -> Result<()> {
    let mut text = words.join("\n");
    text.push('\n');
    std::fs::write(path, text).map_err(|e| DanError::io(path, e))
}

pub fn read_vocab_file(path: &Path) -> Result<Vec<String>> {
    let text = std::fs::read_to_string(path).map_err(|e| DanError::io(path, e))?;
    let words: Vec<String> = text.lines().map(str::to_string).collect();
    if words.first().map(String::as_str) != Some(PAD_WORD) {
        return Err(DanError::MalformedFile {
            path: path.to_path_buf(),
            reason: format!("first entry must be `{PAD_WORD}`"),
        });
    }
    Ok(words)
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let path = dir.join(MANIFEST_FILE);
    let text = std::fs::read_to_string(&path).map_err(|e| DanError::io(&path, e))?;
    let manifest: DatasetManifest =
        serde_json::from_str(&text).map_err(|e| DanError::MalformedFile {
            path: path.clone(),
            reason: e.to_string(),
        })?;
    if manifest.version != MANIFEST_VERSION {
        return Err(DanError::VersionMismatch {
            path,
            found: manifest.version.to_string(),
            expected: MANIFEST_VERSION.to_string(),
        });
    }
    Ok(manifest)
}

pub fn write_embeddings(path: &Path, records: &[EmbeddingRecord]) -> Result<()> {
    let payloads: Vec<Vec<u8>> = records.iter().map(codec::encode_embedding).collect();
    write_records(path, &payloads)
}

pub fn read_embeddings(path: &Path) -> Result<Vec<EmbeddingRecord>> {
    read_records(path)?
        .iter()
        .enumerate()
        .map(|(record, bytes)| {
            codec::decode_embedding(bytes).map_err(|reason| DanError::MalformedRecord {
                path: path.to_path_buf(),
                record,
                reason,
            })
        })
        .collect()
}

impl<T: Record> Dataset<T> {
    pub fn manifest(&self) -> DatasetManifest {
        let max_len = Split::ALL
            .iter()
            .flat_map(|&s| self.splits.get(s))
            .map(Record::text_len)
            .max()
            .unwrap_or(0);
        DatasetManifest {
            version: MANIFEST_VERSION,
            task: T::TASK.to_string(),
            seed: self.seed,
            dims: ManifestDims {
                region_dim: self.vocab.region_dim,
                regions: self.regions,
                vocab_size: self.vocab.vocab_size(),
                num_answers: self.vocab.num_answers(),
                max_len,
            },
            counts: self.counts(),
            noise_sigma: self.noise_sigma,
            concepts: self.vocab.concepts.clone(),
            attributes: self.vocab.attributes.clone(),
            background: self.vocab.background.clone(),
        }
    }

    /// Writes the manifest, vocabulary and split files into `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| DanError::io(dir, e))?;
        let manifest = self.manifest();
        let path = dir.join(MANIFEST_FILE);
        let json = serde_json::to_string_pretty(&manifest)?;
        std::fs::write(&path, json + "\n").map_err(|e| DanError::io(&path, e))?;
        write_vocab_file(&dir.join(VOCAB_FILE), &self.vocab.words)?;
        for split in Split::ALL {
            write_split(&split_path(dir, split), self.splits.get(split))?;
        }
        Ok(())
    }

    pub fn read(dir: &Path) -> Result<Self> {
        let manifest = read_manifest(dir)?;
        let manifest_path = dir.join(MANIFEST_FILE);
        if manifest.task != T::TASK {
            return Err(DanError::KindMismatch {
                expected: T::TASK,
                found: manifest.task,
            });
        }
        let words = read_vocab_file(&dir.join(VOCAB_FILE))?;
        if words.len() != manifest.dims.vocab_size {
            return Err(DanError::MalformedFile {
                path: dir.join(VOCAB_FILE),
                reason: format!(
                    "{} words but the manifest declares {}",
                    words.len(),
                    manifest.dims.vocab_size
                ),
            });
        }
        let mut splits = Splits::default();
        for split in Split::ALL {
            let path = split_path(dir, split);
            let items: Vec<T> = read_split(&path)?;
            let expected = match split {
                Split::Train => manifest.counts.train,
                Split::Val => manifest.counts.val,
                Split::Test => manifest.counts.test,
            };
            if items.len() != expected {
                return Err(DanError::MalformedFile {
                    path,
                    reason: format!("{} records but the manifest declares {expected}", items.len()),
                });
            }
            *splits.get_mut(split) = items;
        }
        if manifest.concepts.iter().any(|c| c.prototype.len() != manifest.dims.region_dim) {
            return Err(DanError::MalformedFile {
                path: manifest_path,
                reason: "prototype dimension disagrees with region_dim".into(),
            });
        }
        Ok(Dataset {
            vocab: ConceptVocabulary {
                words,
                concepts: manifest.concepts,
                attributes: manifest.attributes,
                background: manifest.background,
                region_dim: manifest.dims.region_dim,
            },
            seed: manifest.seed,
            regions: manifest.dims.regions,
            noise_sigma: manifest.noise_sigma,
            splits,
        })
    }
}
